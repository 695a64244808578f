//! ARIMA(p, d, q) fitted by conditional sum of squares.
//!
//! The model on the d-times differenced series `w` is
//!
//! ```text
//! w_t = c + Σ φ_i·w_{t-i} + ε_t + Σ θ_j·ε_{t-j}
//! ```
//!
//! with presample `w` and `ε` set to zero. Coefficients minimise the sum of
//! squared residuals after the first `max(p, q)` steps, found with a
//! Nelder–Mead simplex.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ArimaError {
    #[error("series of length {len} is too short (need {required})")]
    TooShort { len: usize, required: usize },
    #[error("expected {expected} initial values, got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("invalid order ({p},{d},{q}): {reason}")]
    InvalidOrder {
        p: usize,
        d: usize,
        q: usize,
        reason: String,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("model file: {0}")]
    Serialization(String),
}

type Result<T> = std::result::Result<T, ArimaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const MAX_P: usize = 5;
    pub const MAX_D: usize = 2;
    pub const MAX_Q: usize = 5;

    pub fn new(p: usize, d: usize, q: usize) -> Result<Self> {
        let o = Self { p, d, q };
        o.validate(Self::MAX_P, Self::MAX_D, Self::MAX_Q)?;
        Ok(o)
    }

    fn validate(&self, max_p: usize, max_d: usize, max_q: usize) -> Result<()> {
        let bad = |reason: &str| ArimaError::InvalidOrder {
            p: self.p,
            d: self.d,
            q: self.q,
            reason: reason.into(),
        };
        if self.p + self.q == 0 && self.d == 0 {
            return Err(bad("empty model"));
        }
        if self.p > max_p || self.d > max_d || self.q > max_q {
            return Err(bad(&format!("exceeds maxima ({max_p},{max_d},{max_q})")));
        }
        Ok(())
    }

    /// Conditioning steps excluded from the loss.
    pub fn warmup(&self) -> usize {
        self.p.max(self.q)
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

/// Everything needed to continue forecasting from the end of a history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastState {
    /// Last value of the series at each differencing level `0..d`.
    pub level_tails: Vec<f64>,
    /// Last `p` differenced values, oldest first.
    pub recent_values: Vec<f64>,
    /// Last `q` in-sample residuals, oldest first.
    pub recent_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<f64>,
    pub ma_coeffs: Vec<f64>,
    pub intercept: f64,
    pub innovation_variance: f64,
    pub fitted_on_length: usize,
    /// CSS loss at the returned coefficients.
    pub css: f64,
    pub converged: bool,
    /// `false` when the AR polynomial has a root on or inside the unit circle.
    pub stationary: bool,
}

/// Applies the first-difference operator `d` times.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(ArimaError::TooShort {
            len: series.len(),
            required: d + 1,
        });
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// Inverse of [`difference`]: `initial_values` are the first `d` values of
/// the original series.
pub fn integrate(diffed: &[f64], d: usize, initial_values: &[f64]) -> Result<Vec<f64>> {
    if initial_values.len() != d {
        return Err(ArimaError::ArityMismatch {
            expected: d,
            found: initial_values.len(),
        });
    }
    // first element of each differencing level 0..d
    let mut heads = Vec::with_capacity(d);
    let mut level = initial_values.to_vec();
    for _ in 0..d {
        heads.push(level[0]);
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }
    let mut out = diffed.to_vec();
    for k in (0..d).rev() {
        let mut acc = heads[k];
        let mut next = Vec::with_capacity(out.len() + 1);
        next.push(acc);
        for v in &out {
            acc += v;
            next.push(acc);
        }
        out = next;
    }
    Ok(out)
}

/// Residual recursion; `residuals[t]` for every `t`.
fn residuals(intercept: f64, ar: &[f64], ma: &[f64], series: &[f64]) -> Vec<f64> {
    let mut eps = vec![0.0; series.len()];
    for t in 0..series.len() {
        let mut e = series[t] - intercept;
        for (i, phi) in ar.iter().enumerate() {
            if t > i {
                e -= phi * series[t - i - 1];
            }
        }
        for (j, theta) in ma.iter().enumerate() {
            if t > j {
                e -= theta * eps[t - j - 1];
            }
        }
        eps[t] = e;
    }
    eps
}

/// Coefficients laid out as `[intercept, φ_1..φ_p, θ_1..θ_q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CssParams {
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
}

impl CssParams {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.intercept];
        v.extend(&self.ar);
        v.extend(&self.ma);
        v
    }

    fn from_slice(v: &[f64], p: usize) -> Self {
        Self {
            intercept: v[0],
            ar: v[1..1 + p].to_vec(),
            ma: v[1 + p..].to_vec(),
        }
    }
}

/// Conditional sum of squares on an already differenced series.
pub fn css_loss(params: &CssParams, series: &[f64]) -> f64 {
    let warm = params.ar.len().max(params.ma.len());
    residuals(params.intercept, &params.ar, &params.ma, series)
        .iter()
        .skip(warm)
        .map(|e| e * e)
        .sum()
}

/// Allocation-light loss used inside the optimiser.
fn css_loss_flat(v: &[f64], p: usize, series: &[f64], eps: &mut [f64]) -> f64 {
    let c = v[0];
    let ar = &v[1..1 + p];
    let ma = &v[1 + p..];
    let q = ma.len();
    // outside the invertible region the residual recursion is unstable
    if !is_invertible(ma) {
        return f64::INFINITY;
    }
    let warm = p.max(q);
    let mut sum = 0.0;
    for t in 0..series.len() {
        let mut e = series[t] - c;
        for i in 0..p.min(t) {
            e -= ar[i] * series[t - i - 1];
        }
        for j in 0..q.min(t) {
            e -= ma[j] * eps[t - j - 1];
        }
        eps[t] = e;
        if t >= warm {
            sum += e * e;
        }
    }
    if sum.is_finite() {
        sum
    } else {
        f64::INFINITY
    }
}

/// Nelder–Mead minimiser. Returns the best point, its value and whether the
/// tolerance was met within `max_evals`.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], steps: &[f64], max_evals: usize) -> (Vec<f64>, f64, bool) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += steps[i];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = n + 1;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let size = (1..=n)
            .map(|i| simplex[i].iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-12 * (values[0].abs() + 1e-12) && size <= 1e-9 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };

        let xr = along(-alpha);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(-alpha * gamma);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-alpha * rho);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(rho);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = (0..n).map(|j| simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j])).collect();
                    values[i] = f(&shrunk);
                    simplex[i] = shrunk;
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b))).unwrap_or(0);
    (simplex[best].clone(), values[best], converged)
}

/// AR polynomial `1 - φ_1 z - … - φ_p z^p` has all roots outside the unit
/// circle iff every reflection coefficient from the step-down recursion has
/// modulus below one.
pub fn is_stationary(ar: &[f64]) -> bool {
    let mut a = ar.to_vec();
    while let Some(&k) = a.last() {
        if !(k.abs() < 1.0) {
            return false;
        }
        let m = a.len() - 1;
        let denom = 1.0 - k * k;
        a = (0..m).map(|i| (a[i] + k * a[m - 1 - i]) / denom).collect();
    }
    true
}

/// MA polynomial `1 + θ_1 z + … + θ_q z^q` has all roots outside the unit
/// circle.
pub fn is_invertible(ma: &[f64]) -> bool {
    let negated: Vec<f64> = ma.iter().map(|t| -t).collect();
    is_stationary(&negated)
}

fn check_finite(series: &[f64]) -> Result<()> {
    match series.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ArimaError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Fits `order` to `series` by CSS.
pub fn fit(series: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    order.validate(usize::MAX, usize::MAX, usize::MAX)?;
    check_finite(series)?;
    let required = 10 * (order.p + order.q + 1) + order.d;
    if series.len() < required {
        return Err(ArimaError::TooShort {
            len: series.len(),
            required,
        });
    }
    let w = difference(series, order.d)?;
    let n = w.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();

    let start = CssParams {
        intercept: mean,
        ar: vec![0.0; order.p],
        ma: vec![0.0; order.q],
    }
    .to_vec();
    let mut steps = vec![0.1; start.len()];
    steps[0] = if std > 0.0 { 0.1 * std } else { 0.1 };

    let mut eps = vec![0.0; n];
    let mut objective = |v: &[f64]| css_loss_flat(v, order.p, &w, &mut eps);
    let initial = objective(&start);
    let max_evals = 400 * start.len().max(1);
    let (mut best, mut best_val, mut converged) = nelder_mead(&mut objective, &start, &steps, max_evals);
    // one restart from the optimum guards against a collapsed simplex
    let restart_steps: Vec<f64> = steps.iter().map(|s| s * 0.1).collect();
    let (b2, v2, c2) = nelder_mead(&mut objective, &best, &restart_steps, max_evals);
    if v2 <= best_val {
        best = b2;
        best_val = v2;
        converged = c2;
    }
    if !(best_val <= initial) {
        best = start;
        best_val = initial;
    }

    let params = CssParams::from_slice(&best, order.p);
    let n_eff = (n - order.warmup()).max(1) as f64;
    let innovation_variance = (best_val / n_eff).max(f64::MIN_POSITIVE);
    Ok(ArimaModel {
        order,
        stationary: is_stationary(&params.ar),
        ar_coeffs: params.ar,
        ma_coeffs: params.ma,
        intercept: params.intercept,
        innovation_variance,
        fitted_on_length: series.len(),
        css: best_val,
        converged,
    })
}

/// Modulus below which a polynomial root disqualifies a candidate during
/// order selection.
pub const MIN_ROOT_MODULUS: f64 = 1.01;

/// Every root of `1 - Σ c_i z^i` has modulus above `radius`.
fn roots_beyond(coeffs: &[f64], radius: f64) -> bool {
    let scaled: Vec<f64> = coeffs.iter().zip(1..).map(|(c, i)| c * radius.powi(i)).collect();
    is_stationary(&scaled)
}

impl ArimaModel {
    /// AR and MA roots both keep a margin from the unit circle. Fits that
    /// fail this are usually a near-cancelling AR/MA pair fitting noise.
    pub fn well_conditioned(&self) -> bool {
        let neg_ma: Vec<f64> = self.ma_coeffs.iter().map(|t| -t).collect();
        roots_beyond(&self.ar_coeffs, MIN_ROOT_MODULUS) && roots_beyond(&neg_ma, MIN_ROOT_MODULUS)
    }

    /// Akaike criterion on the CSS fit: `n_eff·ln(css/n_eff) + 2(p+q+1)`.
    pub fn aic(&self) -> f64 {
        let n_eff = (self.fitted_on_length - self.order.d - self.order.warmup()).max(1) as f64;
        let k = (self.order.p + self.order.q + 1) as f64;
        n_eff * (self.css / n_eff).max(f64::MIN_POSITIVE).ln() + 2.0 * k
    }

    /// Forecast state at the end of `history`.
    pub fn state_after(&self, history: &[f64]) -> Result<ForecastState> {
        check_finite(history)?;
        let o = self.order;
        let required = (o.p + o.d).max(o.d + 1);
        if history.len() < required {
            return Err(ArimaError::TooShort {
                len: history.len(),
                required,
            });
        }
        let mut level_tails = Vec::with_capacity(o.d);
        let mut level = history.to_vec();
        for _ in 0..o.d {
            level_tails.push(*level.last().expect("non-empty"));
            level = level.windows(2).map(|w| w[1] - w[0]).collect();
        }
        let eps = residuals(self.intercept, &self.ar_coeffs, &self.ma_coeffs, &level);
        let tail = |v: &[f64], k: usize| v[v.len().saturating_sub(k)..].to_vec();
        let mut recent_values = tail(&level, o.p);
        let mut recent_residuals = tail(&eps, o.q);
        // pad with presample zeros when the differenced history is shorter than p or q
        while recent_values.len() < o.p {
            recent_values.insert(0, 0.0);
        }
        while recent_residuals.len() < o.q {
            recent_residuals.insert(0, 0.0);
        }
        Ok(ForecastState {
            level_tails,
            recent_values,
            recent_residuals,
        })
    }

    /// Expected values for the next `horizon` steps after `state`.
    pub fn forecast_from_state(&self, state: &ForecastState, horizon: usize) -> Vec<f64> {
        let p = self.order.p;
        let q = self.order.q;
        let mut values = state.recent_values.clone();
        let mut resid = state.recent_residuals.clone();
        let mut diffs = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut w = self.intercept;
            for i in 0..p {
                w += self.ar_coeffs[i] * values[values.len() - 1 - i];
            }
            for j in 0..q {
                w += self.ma_coeffs[j] * resid[resid.len() - 1 - j];
            }
            diffs.push(w);
            if p > 0 {
                values.push(w);
            }
            if q > 0 {
                resid.push(0.0);
            }
        }
        // integrate back level by level, innermost difference first
        let mut out = diffs;
        for k in (0..self.order.d).rev() {
            let mut acc = state.level_tails[k];
            for v in out.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        out
    }

    pub fn to_json(&self, state: &ForecastState) -> String {
        serde_json::to_string(&SavedArima {
            format: ARIMA_FORMAT.into(),
            model: self.clone(),
            state: state.clone(),
        })
        .expect("model is serialisable")
    }

    pub fn from_json(text: &str) -> Result<(Self, ForecastState)> {
        let saved: SavedArima = serde_json::from_str(text).map_err(|e| ArimaError::Serialization(e.to_string()))?;
        if saved.format != ARIMA_FORMAT {
            return Err(ArimaError::Serialization(format!("unknown format {:?}", saved.format)));
        }
        let m = &saved.model;
        let s = &saved.state;
        if m.ar_coeffs.len() != m.order.p
            || m.ma_coeffs.len() != m.order.q
            || s.level_tails.len() != m.order.d
            || s.recent_values.len() != m.order.p
            || s.recent_residuals.len() != m.order.q
        {
            return Err(ArimaError::Serialization("coefficient or state lengths do not match the order".into()));
        }
        Ok((saved.model, saved.state))
    }
}

const ARIMA_FORMAT: &str = "sea-arima/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedArima {
    format: String,
    model: ArimaModel,
    state: ForecastState,
}

/// Forecasts `horizon` steps past the end of `history`.
pub fn forecast(model: &ArimaModel, history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(ArimaError::TooShort { len: 0, required: 1 });
    }
    let state = model.state_after(history)?;
    Ok(model.forecast_from_state(&state, horizon))
}

/// Grid limits for [`select_order`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderGrid {
    pub max_p: usize,
    pub max_d: usize,
    pub max_q: usize,
}

impl Default for OrderGrid {
    fn default() -> Self {
        Self {
            max_p: 3,
            max_d: 1,
            max_q: 3,
        }
    }
}

/// Candidate orders in the fixed evaluation order (d, then p, then q).
pub fn grid_orders(grid: OrderGrid) -> Vec<ArimaOrder> {
    let mut out = Vec::new();
    for d in 0..=grid.max_d {
        for p in 0..=grid.max_p {
            for q in 0..=grid.max_q {
                if p + q == 0 && d == 0 {
                    continue;
                }
                out.push(ArimaOrder { p, d, q });
            }
        }
    }
    out
}

/// Fits every order of the grid and returns the AIC-best one with its model.
///
/// Candidates with a root within [`MIN_ROOT_MODULUS`] of the origin are
/// skipped unless no candidate is well conditioned. AIC values within `1e-9`
/// relative are treated as tied; ties go to the smaller `p + q`, then the
/// smaller `d`.
pub fn select_order_with_model(series: &[f64], grid: OrderGrid) -> Result<(ArimaOrder, ArimaModel)> {
    use rayon::prelude::*;

    if grid.max_p > ArimaOrder::MAX_P || grid.max_d > ArimaOrder::MAX_D || grid.max_q > ArimaOrder::MAX_Q {
        return Err(ArimaError::InvalidOrder {
            p: grid.max_p,
            d: grid.max_d,
            q: grid.max_q,
            reason: "grid exceeds the order maxima".into(),
        });
    }
    let candidates = grid_orders(grid);
    if candidates.is_empty() {
        return Err(ArimaError::InvalidOrder {
            p: 0,
            d: 0,
            q: 0,
            reason: "grid contains no valid order".into(),
        });
    }
    let largest = candidates
        .iter()
        .map(|o| 10 * (o.p + o.q + 1) + o.d)
        .max()
        .unwrap_or(0);
    if series.len() < largest {
        return Err(ArimaError::TooShort {
            len: series.len(),
            required: largest,
        });
    }
    let mut fits: Vec<ArimaModel> = candidates
        .par_iter()
        .map(|&o| fit(series, o))
        .collect::<Result<Vec<_>>>()?;
    let eligible: Vec<bool> = if fits.iter().any(ArimaModel::well_conditioned) {
        fits.iter().map(ArimaModel::well_conditioned).collect()
    } else {
        vec![true; fits.len()]
    };
    let mut best = eligible.iter().position(|&e| e).expect("at least one eligible fit");
    for i in best + 1..fits.len() {
        if !eligible[i] {
            continue;
        }
        let (a, b) = (fits[i].aic(), fits[best].aic());
        let tol = 1e-9 * a.abs().max(b.abs()).max(1.0);
        let better = if (a - b).abs() <= tol {
            let (oi, ob) = (fits[i].order, fits[best].order);
            (oi.p + oi.q, oi.d) < (ob.p + ob.q, ob.d)
        } else {
            a < b
        };
        if better {
            best = i;
        }
    }
    let model = fits.swap_remove(best);
    Ok((model.order, model))
}

pub fn select_order(series: &[f64], max_p: usize, max_d: usize, max_q: usize) -> Result<ArimaOrder> {
    select_order_with_model(series, OrderGrid { max_p, max_d, max_q }).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::gaussian_noise;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let e = gaussian_noise(n + 500, 1.0, seed);
        let mut y = vec![0.0; n + 500];
        for t in 1..y.len() {
            y[t] = phi * y[t - 1] + e[t];
        }
        y[500..].to_vec()
    }

    #[test]
    fn difference_examples() {
        assert_eq!(difference(&[1.0, 2.0, 4.0, 7.0], 1).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(difference(&[1.0, 5.0], 0).unwrap(), vec![1.0, 5.0]);
        let line: Vec<f64> = (0..10).map(|t| 3.0 + 0.5 * t as f64).collect();
        assert!(difference(&line, 1).unwrap().iter().all(|&v| v == 0.5));
        assert!(matches!(difference(&[1.0], 1), Err(ArimaError::TooShort { .. })));
    }

    #[test]
    fn integrate_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(integrate(&difference(&x, 1).unwrap(), 1, &x[..1]).unwrap(), x.to_vec());
        assert_eq!(integrate(&[2.0, 2.0, 2.0], 1, &[5.0]).unwrap(), vec![5.0, 7.0, 9.0, 11.0]);
        assert_eq!(integrate(&[1.0, 2.0], 0, &[]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            integrate(&[1.0], 2, &[1.0]),
            Err(ArimaError::ArityMismatch { expected: 2, found: 1 })
        );
    }

    #[test]
    fn css_examples() {
        let y = gaussian_noise(50, 1.0, 1);
        let null = CssParams {
            intercept: 0.0,
            ar: vec![],
            ma: vec![],
        };
        // an empty model has no conditioning steps
        let ss: f64 = y.iter().map(|v| v * v).sum();
        assert!((css_loss(&null, &y) - ss).abs() < 1e-12);

        let mut exact = vec![8.0];
        for _ in 0..20 {
            exact.push(0.5 * exact[exact.len() - 1]);
        }
        let ar = CssParams {
            intercept: 0.0,
            ar: vec![0.5],
            ma: vec![],
        };
        assert_eq!(css_loss(&ar, &exact), 0.0);

        let data = ar1(0.6, 500, 3);
        let at = |phi: f64| {
            css_loss(
                &CssParams {
                    intercept: 0.0,
                    ar: vec![phi],
                    ma: vec![],
                },
                &data,
            )
        };
        assert!(at(0.6) <= at(0.3) && at(0.6) <= at(0.9));
    }

    #[test]
    fn fit_recovers_ar1() {
        let m = fit(&ar1(0.7, 2000, 42), ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        assert!((0.62..=0.78).contains(&m.ar_coeffs[0]), "{:?}", m.ar_coeffs);
        assert!(m.stationary);
        assert!(m.innovation_variance > 0.5 && m.innovation_variance < 1.5);
    }

    #[test]
    fn fit_recovers_ma1() {
        let e = gaussian_noise(2001, 1.0, 9);
        let y: Vec<f64> = (1..2001).map(|t| e[t] + 0.5 * e[t - 1]).collect();
        let m = fit(&y, ArimaOrder::new(0, 0, 1).unwrap()).unwrap();
        assert!((0.4..=0.6).contains(&m.ma_coeffs[0]), "{:?}", m.ma_coeffs);
    }

    #[test]
    fn constant_random_walk() {
        let y = vec![4.2; 40];
        let m = fit(&y, ArimaOrder::new(0, 1, 0).unwrap()).unwrap();
        assert_eq!(m.intercept, 0.0);
        assert!(m.innovation_variance > 0.0);
        assert!(forecast(&m, &y, 5).unwrap().iter().all(|&v| v == 4.2));
    }

    #[test]
    fn fit_is_deterministic_and_never_regresses() {
        let y = ar1(0.5, 400, 7);
        let o = ArimaOrder::new(2, 0, 1).unwrap();
        let a = fit(&y, o).unwrap();
        let b = fit(&y, o).unwrap();
        assert_eq!(a, b);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let start = CssParams {
            intercept: mean,
            ar: vec![0.0, 0.0],
            ma: vec![0.0],
        };
        assert!(a.css <= css_loss(&start, &y));
    }

    #[test]
    fn too_short_and_invalid_orders() {
        assert!(matches!(fit(&[1.0; 19], ArimaOrder::new(1, 0, 0).unwrap()), Err(ArimaError::TooShort { .. })));
        assert!(ArimaOrder::new(0, 0, 0).is_err());
        assert!(ArimaOrder::new(6, 0, 0).is_err());
    }

    #[test]
    fn forecast_examples() {
        let rw = ArimaModel {
            order: ArimaOrder { p: 0, d: 1, q: 0 },
            ar_coeffs: vec![],
            ma_coeffs: vec![],
            intercept: 0.0,
            innovation_variance: 1.0,
            fitted_on_length: 10,
            css: 0.0,
            converged: true,
            stationary: true,
        };
        assert_eq!(forecast(&rw, &[1.0, 3.0, 2.5], 3).unwrap(), vec![2.5; 3]);

        let ar = ArimaModel {
            order: ArimaOrder { p: 1, d: 0, q: 0 },
            ar_coeffs: vec![0.5],
            ..rw.clone()
        };
        assert_eq!(forecast(&ar, &[3.0, 8.0], 4).unwrap(), vec![4.0, 2.0, 1.0, 0.5]);

        let mean_model = ArimaModel {
            order: ArimaOrder { p: 0, d: 0, q: 0 },
            intercept: 7.0,
            ..rw.clone()
        };
        assert_eq!(forecast(&mean_model, &[1.0, 2.0], 3).unwrap(), vec![7.0; 3]);

        let drift = ArimaModel {
            order: ArimaOrder { p: 0, d: 2, q: 0 },
            ..rw
        };
        // second differences zero: a line continues
        assert_eq!(forecast(&drift, &[1.0, 3.0, 5.0], 2).unwrap(), vec![7.0, 9.0]);
    }

    #[test]
    fn ar1_forecast_converges_to_mean() {
        let m = ArimaModel {
            order: ArimaOrder { p: 1, d: 0, q: 0 },
            ar_coeffs: vec![0.9],
            ma_coeffs: vec![],
            intercept: 2.0,
            innovation_variance: 1.0,
            fitted_on_length: 10,
            css: 0.0,
            converged: true,
            stationary: true,
        };
        let f = forecast(&m, &[100.0], 200).unwrap();
        assert!((f[199] - 20.0).abs() <= 1e-6);
    }

    #[test]
    fn stationarity_check() {
        assert!(is_stationary(&[0.5]));
        assert!(!is_stationary(&[1.0]));
        assert!(is_stationary(&[1.2, -0.5]));
        assert!(!is_stationary(&[0.6, 0.5]));
        assert!(is_stationary(&[]));
        assert!(is_invertible(&[0.5]) && !is_invertible(&[-1.2]));
        assert!(!is_invertible(&[1.93, 1.02]));
    }

    #[test]
    fn order_selection() {
        let strong = ar1(0.9, 2000, 5);
        let o = select_order(&strong, 3, 1, 3).unwrap();
        assert!(o.p >= 1 && o.d == 0, "{o}");

        let wn = gaussian_noise(1000, 1.0, 6);
        let o = select_order(&wn, 2, 1, 2).unwrap();
        assert_eq!(o.d, 0);
        assert!(o.p + o.q <= 2, "{o}");

        let noise = gaussian_noise(600, 1.0, 2);
        let trend: Vec<f64> = noise.iter().enumerate().map(|(t, e)| 0.5 * t as f64 + e).collect();
        let o = select_order(&trend, 2, 1, 2).unwrap();
        assert!(o.d >= 1, "{o}");
    }

    #[test]
    fn json_roundtrip() {
        let y = ar1(0.4, 300, 1);
        let m = fit(&y, ArimaOrder::new(1, 1, 1).unwrap()).unwrap();
        let s = m.state_after(&y).unwrap();
        let (m2, s2) = ArimaModel::from_json(&m.to_json(&s)).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, s2);
        assert_eq!(m.forecast_from_state(&s, 10), forecast(&m2, &y, 10).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // rounding in the differences is amplified by up to n^d on the
            // way back, so arbitrary floats are checked on short series
            #[test]
            fn difference_integrate_roundtrip(x in proptest::collection::vec(-100.0f64..100.0, 4..30), d in 0usize..=3) {
                let w = difference(&x, d).unwrap();
                prop_assert_eq!(w.len(), x.len() - d);
                let back = integrate(&w, d, &x[..d]).unwrap();
                let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in back.iter().zip(&x) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }

            // on a dyadic grid every difference is exact, so the roundtrip is too
            #[test]
            fn dyadic_roundtrip_is_bitwise(k in proptest::collection::vec(-(1i64 << 30)..(1i64 << 30), 4..500), d in 0usize..=3) {
                let x: Vec<f64> = k.iter().map(|&v| v as f64 / 1024.0).collect();
                let back = integrate(&difference(&x, d).unwrap(), d, &x[..d]).unwrap();
                prop_assert_eq!(back, x);
            }
        }
    }
}
