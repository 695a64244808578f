//! Seasonal-trend decomposition by LOESS, single period and cascaded.
//!
//! The single-period procedure is the classic inner loop (cycle-subseries
//! smoothing, low-pass filtering, deseasonalised trend smoothing) wrapped in
//! an outer loop of bisquare robustness reweighting.
//!
//! The cascade runs one STL stage per period. Each stage keeps its seasonal
//! component and hands `trend + remainder` of that stage to the next one, so
//! the seasonals and the final trend always add back up to the input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::loess::Kernel;
use crate::timeseries::{TimeSeries, TimeSeriesError};

#[derive(Debug, thiserror::Error)]
pub enum StlError {
    #[error("series of length {len} is too short for period {period} (need {required})")]
    TooShort {
        len: usize,
        period: usize,
        required: usize,
    },
    #[error("invalid STL parameters: {0}")]
    InvalidParams(String),
    #[error("invalid cascade configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
}

type Result<T> = std::result::Result<T, StlError>;

/// Smallest odd integer that is `>= x`.
pub fn smallest_odd_at_least(x: f64) -> usize {
    let c = x.ceil().max(1.0) as usize;
    if c % 2 == 0 {
        c + 1
    } else {
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StlParams {
    pub period: usize,
    pub seasonal_span: usize,
    pub trend_span: usize,
    pub lowpass_span: usize,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub seasonal_degree: usize,
    pub trend_degree: usize,
}

impl StlParams {
    pub const DEFAULT_SEASONAL_SPAN: usize = 35;

    /// Defaults for one period: seasonal span 35, the narrowest valid trend
    /// and low-pass spans, two inner passes and one robustness pass.
    pub fn for_period(period: usize) -> Self {
        let seasonal_span = Self::DEFAULT_SEASONAL_SPAN;
        Self {
            period,
            seasonal_span,
            trend_span: Self::min_trend_span(period, seasonal_span),
            lowpass_span: smallest_odd_at_least(period as f64),
            inner_iterations: 2,
            outer_iterations: 1,
            seasonal_degree: 0,
            trend_degree: 1,
        }
    }

    pub fn min_trend_span(period: usize, seasonal_span: usize) -> usize {
        smallest_odd_at_least(1.5 * period as f64 / (1.0 - 1.5 / seasonal_span as f64))
    }

    /// Changes the seasonal span and re-derives the minimum trend span if the
    /// current one became too narrow.
    pub fn with_seasonal_span(mut self, seasonal_span: usize) -> Self {
        self.seasonal_span = seasonal_span;
        self.trend_span = self.trend_span.max(Self::min_trend_span(self.period, seasonal_span));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StlError::InvalidParams(m));
        if self.period < 2 {
            return bad(format!("period {} must be >= 2", self.period));
        }
        if self.seasonal_span < 7 || self.seasonal_span % 2 == 0 {
            return bad(format!("seasonal span {} must be odd and >= 7", self.seasonal_span));
        }
        let min_trend = Self::min_trend_span(self.period, self.seasonal_span);
        if self.trend_span % 2 == 0 || self.trend_span < min_trend {
            return bad(format!(
                "trend span {} must be odd and >= {min_trend} for period {}",
                self.trend_span, self.period
            ));
        }
        let min_low = smallest_odd_at_least(self.period as f64);
        if self.lowpass_span % 2 == 0 || self.lowpass_span < min_low {
            return bad(format!("low-pass span {} must be odd and >= {min_low}", self.lowpass_span));
        }
        if self.inner_iterations == 0 {
            return bad("inner iterations must be >= 1".into());
        }
        if self.seasonal_degree > 1 || self.trend_degree > 1 {
            return bad("seasonal and trend degrees must be 0 or 1".into());
        }
        Ok(())
    }
}

/// `input == seasonal + trend + remainder`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub seasonal: TimeSeries,
    pub trend: TimeSeries,
    pub remainder: TimeSeries,
    /// Number of local fits that fell back to a lower degree.
    pub singular_fallbacks: usize,
}

/// Per-period seasonal components plus the final trend.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeDecomposition {
    pub seasonals: BTreeMap<usize, TimeSeries>,
    pub trend: TimeSeries,
}

impl CascadeDecomposition {
    pub fn periods(&self) -> Vec<usize> {
        self.seasonals.keys().copied().collect()
    }

    /// Pointwise sum of every seasonal component.
    pub fn seasonal_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.trend.len()];
        for s in self.seasonals.values() {
            for (acc, v) in sum.iter_mut().zip(s.values()) {
                *acc += v;
            }
        }
        sum
    }

    /// Seasonals plus trend.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut sum = self.seasonal_sum();
        for (acc, t) in sum.iter_mut().zip(self.trend.values()) {
            *acc += t;
        }
        sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CascadeOrder {
    /// Shortest period first.
    #[default]
    Ascending,
    Descending,
}

/// Runs STL on `series` and returns the three components.
pub fn stl_decompose(series: &TimeSeries, params: &StlParams) -> Result<Decomposition> {
    params.validate()?;
    let y = series.values();
    let required = 2 * params.period;
    if y.len() < required {
        return Err(StlError::TooShort {
            len: y.len(),
            period: params.period,
            required,
        });
    }
    let fit = StlFit::run(y, params);
    let remainder: Vec<f64> = (0..y.len()).map(|i| y[i] - fit.seasonal[i] - fit.trend[i]).collect();
    Ok(Decomposition {
        seasonal: series.with_values(format!("s{}", params.period), fit.seasonal)?,
        trend: series.with_values("trend", fit.trend)?,
        remainder: series.with_values("remainder", remainder)?,
        singular_fallbacks: fit.fallbacks,
    })
}

/// Cascade with default STL parameters for each period.
///
/// `periods` must be strictly increasing; stages run shortest period first.
pub fn cascade_decompose(series: &TimeSeries, periods: &[usize]) -> Result<CascadeDecomposition> {
    let stages: Vec<StlParams> = periods.iter().map(|&p| StlParams::for_period(p)).collect();
    cascade_decompose_with(series, &stages, CascadeOrder::Ascending)
}

/// Cascade over explicit per-period parameters, listed in increasing period
/// order, executed in `order`.
pub fn cascade_decompose_with(
    series: &TimeSeries,
    stages: &[StlParams],
    order: CascadeOrder,
) -> Result<CascadeDecomposition> {
    if stages.is_empty() {
        return Err(StlError::Config("at least one period is required".into()));
    }
    if let Some(w) = stages.windows(2).find(|w| w[1].period <= w[0].period) {
        return Err(StlError::Config(format!(
            "periods must be strictly increasing, got {} then {}",
            w[0].period, w[1].period
        )));
    }
    let mut running = series.values().to_vec();
    let mut seasonals = BTreeMap::new();
    let run_order: Vec<&StlParams> = match order {
        CascadeOrder::Ascending => stages.iter().collect(),
        CascadeOrder::Descending => stages.iter().rev().collect(),
    };
    for params in run_order {
        let stage_input = series.with_values("stage", running.clone())?;
        let d = stl_decompose(&stage_input, params)?;
        // centre the seasonal; its mean moves into what the next stage sees
        let s = d.seasonal.values();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let seasonal: Vec<f64> = s.iter().map(|v| v - mean).collect();
        for (x, s) in running.iter_mut().zip(&seasonal) {
            *x -= s;
        }
        seasonals.insert(params.period, series.with_values(format!("s{}", params.period), seasonal)?);
    }
    Ok(CascadeDecomposition {
        seasonals,
        trend: series.with_values("trend", running)?,
    })
}

struct StlFit {
    seasonal: Vec<f64>,
    trend: Vec<f64>,
    fallbacks: usize,
}

impl StlFit {
    fn run(y: &[f64], p: &StlParams) -> Self {
        let n = y.len();
        let np = p.period;
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut trend = vec![0.0; n];
        let mut seasonal = vec![0.0; n];
        let mut robustness: Option<Vec<f64>> = None;
        let mut fallbacks = 0;

        for pass in 0..=p.outer_iterations {
            for _ in 0..p.inner_iterations {
                let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, b)| a - b).collect();
                let (cycle, f1) = smooth_cycle_subseries(&detrended, p, robustness.as_deref());
                let (low, f2) = low_pass(&cycle, p, &positions);
                for i in 0..n {
                    seasonal[i] = cycle[np + i] - low[i];
                }
                let deseasonalised: Vec<f64> = y.iter().zip(&seasonal).map(|(a, b)| a - b).collect();
                let kernel = Kernel {
                    xs: &positions,
                    ys: &deseasonalised,
                    robustness: robustness.as_deref(),
                    span: p.trend_span,
                    degree: p.trend_degree,
                };
                let mut f3 = 0;
                for (i, t) in trend.iter_mut().enumerate() {
                    let (v, exact) = kernel.fit_at(i as f64);
                    f3 += usize::from(!exact);
                    *t = v;
                }
                fallbacks += f1 + f2 + f3;
            }
            if pass < p.outer_iterations {
                let residual: Vec<f64> = (0..n).map(|i| y[i] - seasonal[i] - trend[i]).collect();
                robustness = Some(robustness_weights(&residual));
            }
        }
        Self {
            seasonal,
            trend,
            fallbacks,
        }
    }
}

/// Smooths each cycle-subseries and extends it by one cycle on both sides.
/// Output index `i` corresponds to time `i - period`.
fn smooth_cycle_subseries(x: &[f64], p: &StlParams, robustness: Option<&[f64]>) -> (Vec<f64>, usize) {
    let n = x.len();
    let np = p.period;
    let mut out = vec![0.0; n + 2 * np];
    let mut fallbacks = 0;
    let mut sub = Vec::with_capacity(n / np + 1);
    let mut sub_w = Vec::with_capacity(n / np + 1);
    let mut xs = Vec::with_capacity(n / np + 1);
    for phase in 0..np.min(n) {
        sub.clear();
        sub_w.clear();
        sub.extend(x.iter().skip(phase).step_by(np));
        if let Some(r) = robustness {
            sub_w.extend(r.iter().skip(phase).step_by(np));
        }
        let k = sub.len();
        xs.clear();
        xs.extend((0..k).map(|i| i as f64));
        let kernel = Kernel {
            xs: &xs,
            ys: &sub,
            robustness: robustness.map(|_| sub_w.as_slice()),
            span: p.seasonal_span,
            degree: p.seasonal_degree,
        };
        for m in 0..k + 2 {
            let (v, exact) = kernel.fit_at(m as f64 - 1.0);
            fallbacks += usize::from(!exact);
            out[m * np + phase] = v;
        }
    }
    (out, fallbacks)
}

fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
    let m = x.len() + 1 - len;
    let mut out = Vec::with_capacity(m);
    let mut sum: f64 = x[..len].iter().sum();
    out.push(sum / len as f64);
    for i in 1..m {
        sum += x[i + len - 1] - x[i - 1];
        out.push(sum / len as f64);
    }
    out
}

/// Moving averages of length period, period and 3, then a degree-1 LOESS.
fn low_pass(cycle: &[f64], p: &StlParams, positions: &[f64]) -> (Vec<f64>, usize) {
    let a = moving_average(cycle, p.period);
    let b = moving_average(&a, p.period);
    let c = moving_average(&b, 3);
    let kernel = Kernel {
        xs: &positions[..c.len()],
        ys: &c,
        robustness: None,
        span: p.lowpass_span,
        degree: 1,
    };
    let mut fallbacks = 0;
    let out = (0..c.len())
        .map(|i| {
            let (v, exact) = kernel.fit_at(i as f64);
            fallbacks += usize::from(!exact);
            v
        })
        .collect();
    (out, fallbacks)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Bisquare weights on `|residual| / (6·median|residual|)`, clipped to `[1e-4, 1]`.
pub fn robustness_weights(residual: &[f64]) -> Vec<f64> {
    let mut abs: Vec<f64> = residual.iter().map(|r| r.abs()).collect();
    let h = 6.0 * median(&mut abs);
    residual
        .iter()
        .map(|r| {
            if !(h > 0.0) {
                return 1.0;
            }
            let u = r.abs() / h;
            let w = if u <= 0.001 {
                1.0
            } else if u <= 0.999 {
                let t = 1.0 - u * u;
                t * t
            } else {
                0.0
            };
            w.clamp(1e-4, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{default_start, gaussian_noise};
    use std::f64::consts::PI;

    fn series(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new("y", default_start(), values).unwrap()
    }

    fn sine(n: usize, period: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|t| amp * (2.0 * PI * t as f64 / period as f64 + phase).sin())
            .collect()
    }

    fn rmse(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn default_spans() {
        let p24 = StlParams::for_period(24);
        assert_eq!((p24.trend_span, p24.lowpass_span), (39, 25));
        let p3 = StlParams::for_period(3);
        assert_eq!((p3.trend_span, p3.lowpass_span), (5, 3));
        assert_eq!(StlParams::for_period(12).trend_span, 19);
        assert_eq!(StlParams::for_period(4).trend_span, 7);
        for p in [3, 4, 12, 24] {
            StlParams::for_period(p).validate().unwrap();
        }
        let mut bad = StlParams::for_period(24);
        bad.trend_span = 37;
        assert!(bad.validate().is_err());
        bad = StlParams::for_period(24);
        bad.seasonal_span = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sinusoid_recovered() {
        let truth = sine(24 * 60, 24, 10.0, 0.4);
        let d = stl_decompose(&series(truth.clone()), &StlParams::for_period(24)).unwrap();
        assert!(rmse(d.seasonal.values(), &truth) <= 0.02 * 10.0);
        assert!(d.trend.values().iter().all(|t| t.abs() < 0.2));
    }

    #[test]
    fn constant_goes_to_trend() {
        let d = stl_decompose(&series(vec![7.5; 200]), &StlParams::for_period(12)).unwrap();
        for i in 0..200 {
            assert!((d.trend.values()[i] - 7.5).abs() < 1e-9);
            assert!(d.seasonal.values()[i].abs() < 1e-9);
            assert!(d.remainder.values()[i].abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_and_bad_order() {
        assert!(matches!(
            stl_decompose(&series(vec![1.0; 47]), &StlParams::for_period(24)),
            Err(StlError::TooShort { required: 48, .. })
        ));
        // minimum length works
        stl_decompose(&series(gaussian_noise(48, 1.0, 3)), &StlParams::for_period(24)).unwrap();
        assert!(matches!(
            cascade_decompose(&series(vec![1.0; 100]), &[4, 3]),
            Err(StlError::Config(_))
        ));
        assert!(matches!(cascade_decompose(&series(vec![1.0; 100]), &[]), Err(StlError::Config(_))));
    }

    #[test]
    fn cascade_constant() {
        let c = cascade_decompose(&series(vec![-3.0; 500]), &[3, 4, 12, 24]).unwrap();
        for s in c.seasonals.values() {
            assert!(s.values().iter().all(|v| v.abs() < 1e-9));
        }
        assert!(c.trend.values().iter().all(|v| (v + 3.0).abs() < 1e-9));
    }

    #[test]
    fn cascade_single_period_columns() {
        let c = cascade_decompose(&series(gaussian_noise(300, 1.0, 1)), &[24]).unwrap();
        assert_eq!(c.periods(), vec![24]);
    }

    #[test]
    fn descending_order_also_reconstructs() {
        let y = gaussian_noise(600, 2.0, 5);
        let stages: Vec<StlParams> = [3, 4, 12, 24].iter().map(|&p| StlParams::for_period(p)).collect();
        let c = cascade_decompose_with(&series(y.clone()), &stages, CascadeOrder::Descending).unwrap();
        for (a, b) in c.reconstruct().iter().zip(&y) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn seasonals_are_centred() {
        let y: Vec<f64> = sine(1000, 24, 5.0, 0.0)
            .iter()
            .zip(gaussian_noise(1000, 1.0, 8))
            .map(|(a, b)| a + b + 40.0)
            .collect();
        let std = crate::timeseries::fit_normalizer(&y).unwrap().std;
        let c = cascade_decompose(&series(y), &[3, 4, 12, 24]).unwrap();
        for s in c.seasonals.values() {
            let m = s.values().iter().sum::<f64>() / s.len() as f64;
            assert!(m.abs() <= 1e-6 * std);
        }
    }

    #[test]
    fn robustness_weights_downweight_outlier() {
        let mut r = gaussian_noise(100, 1.0, 2);
        r[10] = 50.0;
        let w = robustness_weights(&r);
        assert_eq!(w[10], 1e-4);
        assert!(w.iter().all(|w| (1e-4..=1.0).contains(w)));
        assert!(robustness_weights(&[0.0; 5]).iter().all(|&w| w == 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn single_reconstruction(seed in 0u64..1000, scale in 0.1f64..1000.0, period in prop::sample::select(vec![3usize, 4, 12, 24])) {
                let y: Vec<f64> = gaussian_noise(400, scale, seed);
                let d = stl_decompose(&series(y.clone()), &StlParams::for_period(period)).unwrap();
                for i in 0..y.len() {
                    let s = d.seasonal.values()[i] + d.trend.values()[i] + d.remainder.values()[i];
                    prop_assert!((s - y[i]).abs() <= 1e-9);
                }
            }

            #[test]
            fn location_equivariance(seed in 0u64..1000, c in -500.0f64..500.0) {
                let y = gaussian_noise(300, 3.0, seed);
                let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
                let a = cascade_decompose(&series(y), &[3, 4, 12, 24]).unwrap();
                let b = cascade_decompose(&series(shifted), &[3, 4, 12, 24]).unwrap();
                for (p, s) in &a.seasonals {
                    for (u, v) in s.values().iter().zip(b.seasonals[p].values()) {
                        prop_assert!((u - v).abs() <= 1e-6 * c.abs().max(1.0));
                    }
                }
                for (u, v) in a.trend.values().iter().zip(b.trend.values()) {
                    prop_assert!((v - u - c).abs() <= 1e-6 * c.abs().max(1.0));
                }
            }

            #[test]
            fn scale_equivariance(seed in 0u64..1000, a in 0.01f64..100.0) {
                let y = gaussian_noise(300, 3.0, seed);
                let scaled: Vec<f64> = y.iter().map(|v| v * a).collect();
                let mut p = StlParams::for_period(24);
                p.outer_iterations = 0;
                let d1 = stl_decompose(&series(y), &p).unwrap();
                let d2 = stl_decompose(&series(scaled), &p).unwrap();
                let pairs = [
                    (d1.seasonal.values(), d2.seasonal.values()),
                    (d1.trend.values(), d2.trend.values()),
                    (d1.remainder.values(), d2.remainder.values()),
                ];
                for (u, v) in pairs {
                    for (x, z) in u.iter().zip(v) {
                        prop_assert!((x * a - z).abs() <= 1e-9 * (x * a).abs().max(a));
                    }
                }
            }
        }
    }
}
