//! WebAssembly bindings for the browser demo.
//!
//! Every export takes plain numbers and returns a JSON string, either the
//! result object or `{"error": "..."}`, so the page needs no generated
//! TypeScript types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sea_core::arima::{forecast, select_order_with_model, OrderGrid};
use sea_core::loess::{loess_smooth, LoessParams};
use sea_core::stl::cascade_decompose;
use sea_core::timeseries::{gaussian_noise, synthesize, SynthConfig, SUPPORTED_PERIODS};

const MAX_HOURS: usize = 24 * 7 * 16;

#[derive(Debug, Serialize)]
pub struct Component {
    pub name: String,
    pub values: Vec<f64>,
    /// Generating component, when the input was synthetic.
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct DecomposeOutput {
    pub demand: Vec<f64>,
    pub components: Vec<Component>,
    pub max_reconstruction_error: f64,
}

#[derive(Debug, Serialize)]
pub struct SmoothOutput {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub truth: Vec<f64>,
    pub fit: Vec<f64>,
    pub singular_fallbacks: usize,
}

#[derive(Debug, Serialize)]
pub struct ForecastOutput {
    pub history: Vec<f64>,
    pub actual: Vec<f64>,
    pub forecast: Vec<f64>,
    pub order: [usize; 3],
    pub aic: f64,
}

fn to_json<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

/// Parses `"3,24"` into sorted supported periods.
fn parse_periods(text: &str) -> Result<Vec<usize>, String> {
    let mut periods = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let p: usize = s.trim().parse().map_err(|_| format!("bad period {s:?}"))?;
            if SUPPORTED_PERIODS.contains(&p) {
                Ok(p)
            } else {
                Err(format!("period {p} is not one of {SUPPORTED_PERIODS:?}"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    periods.sort_unstable();
    periods.dedup();
    if periods.is_empty() {
        return Err("no periods selected".into());
    }
    Ok(periods)
}

fn synthetic(hours: usize, seed: u64, noise: f64) -> Result<sea_core::timeseries::Synthetic, String> {
    if !(240..=MAX_HOURS).contains(&hours) {
        return Err(format!("hours must be in 240..={MAX_HOURS}"));
    }
    let mut config = SynthConfig::with_periods(&SUPPORTED_PERIODS, hours, seed);
    config.noise_std = noise.max(0.0);
    synthesize(&config).map_err(|e| e.to_string())
}

pub fn decompose(hours: usize, seed: u64, noise: f64, periods: &str) -> Result<DecomposeOutput, String> {
    let periods = parse_periods(periods)?;
    let synth = synthetic(hours, seed, noise)?;
    let demand = &synth.dataset.demand;
    let dec = cascade_decompose(demand, &periods).map_err(|e| e.to_string())?;
    let max_reconstruction_error = dec
        .reconstruct()
        .iter()
        .zip(demand.values())
        .fold(0.0f64, |m, (r, y)| m.max((r - y).abs()));
    let mut components: Vec<Component> = dec
        .seasonals
        .iter()
        .map(|(p, s)| Component {
            name: format!("s{p}"),
            values: s.values().to_vec(),
            truth: synth.truth.seasonals.get(p).map(|t| t.values().to_vec()),
        })
        .collect();
    components.push(Component {
        name: "trend".into(),
        values: dec.trend.values().to_vec(),
        truth: None,
    });
    Ok(DecomposeOutput {
        demand: demand.values().to_vec(),
        components,
        max_reconstruction_error,
    })
}

/// Noisy samples of `sin(x) + 0.1·x` on uneven abscissae, smoothed by LOESS.
pub fn smooth(n: usize, span: usize, degree: usize, noise: f64, seed: u64) -> Result<SmoothOutput, String> {
    if !(5..=2000).contains(&n) {
        return Err("n must be in 5..=2000".into());
    }
    let jitter = gaussian_noise(n, 0.3, seed ^ 0x5eed);
    let eps = gaussian_noise(n, noise.max(0.0), seed);
    let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 + 0.01 * jitter[i].abs()).collect();
    let truth: Vec<f64> = xs.iter().map(|x| x.sin() + 0.1 * x).collect();
    let ys: Vec<f64> = truth.iter().zip(&eps).map(|(t, e)| t + e).collect();
    let out = loess_smooth(&xs, &ys, &LoessParams::new(span, degree), &xs).map_err(|e| e.to_string())?;
    Ok(SmoothOutput {
        xs,
        ys,
        truth,
        fit: out.values,
        singular_fallbacks: out.singular_fallbacks.len(),
    })
}

/// Fits the decomposed trend of a synthetic series up to `holdout` hours
/// before its end and forecasts the held-out hours.
pub fn trend_forecast(hours: usize, holdout: usize, seed: u64, max_p: usize, max_q: usize) -> Result<ForecastOutput, String> {
    if holdout == 0 || holdout * 2 > hours {
        return Err("holdout must be between 1 and half the series".into());
    }
    let synth = synthetic(hours, seed, 1.0)?;
    let dec = cascade_decompose(&synth.dataset.demand, &SUPPORTED_PERIODS).map_err(|e| e.to_string())?;
    let trend = dec.trend.values();
    let (history, actual) = trend.split_at(hours - holdout);
    let grid = OrderGrid {
        max_p: max_p.min(5),
        max_d: 1,
        max_q: max_q.min(5),
    };
    let (order, model) = select_order_with_model(history, grid).map_err(|e| e.to_string())?;
    let forecast = forecast(&model, history, holdout).map_err(|e| e.to_string())?;
    Ok(ForecastOutput {
        history: history.to_vec(),
        actual: actual.to_vec(),
        forecast,
        order: [order.p, order.d, order.q],
        aic: model.aic(),
    })
}

#[wasm_bindgen]
pub fn decompose_json(hours: u32, seed: u32, noise: f64, periods: &str) -> String {
    to_json(decompose(hours as usize, seed as u64, noise, periods))
}

#[wasm_bindgen]
pub fn smooth_json(n: u32, span: u32, degree: u32, noise: f64, seed: u32) -> String {
    to_json(smooth(n as usize, span as usize, degree as usize, noise, seed as u64))
}

#[wasm_bindgen]
pub fn trend_forecast_json(hours: u32, holdout: u32, seed: u32, max_p: u32, max_q: u32) -> String {
    to_json(trend_forecast(
        hours as usize,
        holdout as usize,
        seed as u64,
        max_p as usize,
        max_q as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_adds_up_and_has_truth() {
        let out = decompose(24 * 30, 1, 1.0, "24,3").unwrap();
        assert!(out.max_reconstruction_error <= 1e-9);
        let names: Vec<&str> = out.components.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["s3", "s24", "trend"]);
        assert!(out.components[1].truth.is_some());
        assert_eq!(out.demand.len(), 720);
    }

    #[test]
    fn bad_periods_are_reported_as_json() {
        let text = decompose_json(720, 1, 1.0, "3,5");
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["error"].as_str().unwrap().contains("period 5"));
        assert!(decompose_json(720, 1, 1.0, "").contains("error"));
        assert!(decompose_json(10, 1, 1.0, "24").contains("error"));
    }

    #[test]
    fn smoothing_tracks_the_curve() {
        let out = smooth(300, 41, 2, 0.2, 3).unwrap();
        let err: f64 = out.fit.iter().zip(&out.truth).map(|(f, t)| (f - t).powi(2)).sum::<f64>() / 300.0;
        assert!(err.sqrt() < 0.1);
        let v: serde_json::Value = serde_json::from_str(&smooth_json(300, 40, 1, 0.2, 3)).unwrap();
        assert!(v["error"].is_string(), "even span is rejected");
    }

    #[test]
    fn forecast_has_requested_horizon() {
        let out = trend_forecast(24 * 40, 48, 2, 2, 2).unwrap();
        assert_eq!(out.forecast.len(), 48);
        assert_eq!(out.actual.len(), 48);
        assert!(out.order[0] <= 2 && out.order[2] <= 2);
        assert!(trend_forecast_json(960, 0, 1, 1, 1).contains("error"));
    }
}
