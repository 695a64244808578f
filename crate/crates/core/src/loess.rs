//! Locally weighted polynomial regression.
//!
//! Each evaluation point gets its own weighted least-squares fit over the
//! `span` nearest data points. Neighbourhood weights are tricube in the
//! distance scaled by the largest distance inside the window, optionally
//! multiplied by per-point robustness weights.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LoessError {
    #[error("need at least {span} points for span {span}, got {len}")]
    InsufficientData { len: usize, span: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("xs and ys differ in length ({xs} vs {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("xs must be strictly increasing (violated at index {0})")]
    NotIncreasing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoessParams {
    /// Window width in points; odd.
    pub span: usize,
    /// 0, 1 or 2.
    pub degree: usize,
    /// Optional robustness weights in `[0, 1]`, one per data point.
    pub external_weights: Option<Vec<f64>>,
}

impl LoessParams {
    pub fn new(span: usize, degree: usize) -> Self {
        Self {
            span,
            degree,
            external_weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.external_weights = Some(weights);
        self
    }

    pub fn validate(&self, n: usize) -> Result<(), LoessError> {
        if self.degree > 2 {
            return Err(LoessError::InvalidParams(format!("degree {} not in {{0,1,2}}", self.degree)));
        }
        if self.span % 2 == 0 || self.span < self.degree + 2 {
            return Err(LoessError::InvalidParams(format!(
                "span {} must be odd and >= degree + 2 = {}",
                self.span,
                self.degree + 2
            )));
        }
        if let Some(w) = &self.external_weights {
            if w.len() != n {
                return Err(LoessError::InvalidParams(format!(
                    "{} external weights for {n} points",
                    w.len()
                )));
            }
            if let Some(i) = w.iter().position(|w| !(0.0..=1.0).contains(w)) {
                return Err(LoessError::InvalidParams(format!("external weight {} at {i} outside [0,1]", w[i])));
            }
        }
        Ok(())
    }
}

/// Smoothed values plus the evaluation indices where the fit was
/// rank-deficient and fell back to a weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LoessOutput {
    pub values: Vec<f64>,
    pub singular_fallbacks: Vec<usize>,
}

/// Evaluates the LOESS fit of `(xs, ys)` at every point of `eval_points`.
pub fn loess_smooth(
    xs: &[f64],
    ys: &[f64],
    params: &LoessParams,
    eval_points: &[f64],
) -> Result<LoessOutput, LoessError> {
    if xs.len() != ys.len() {
        return Err(LoessError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    params.validate(xs.len())?;
    if xs.len() < params.span {
        return Err(LoessError::InsufficientData {
            len: xs.len(),
            span: params.span,
        });
    }
    if let Some(i) = xs.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(LoessError::NotIncreasing(i + 1));
    }
    let kernel = Kernel {
        xs,
        ys,
        robustness: params.external_weights.as_deref(),
        span: params.span,
        degree: params.degree,
    };
    let mut values = Vec::with_capacity(eval_points.len());
    let mut singular_fallbacks = Vec::new();
    for (i, &x) in eval_points.iter().enumerate() {
        let (v, exact) = kernel.fit_at(x);
        if !exact {
            singular_fallbacks.push(i);
        }
        values.push(v);
    }
    Ok(LoessOutput {
        values,
        singular_fallbacks,
    })
}

#[inline]
fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

/// Single-point LOESS fit over sorted abscissae.
///
/// Unlike [`loess_smooth`], a span wider than the data is allowed: the whole
/// sample is used and the bandwidth is widened by `(span - n) / 2`, which is
/// what short STL cycle-subseries need.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub robustness: Option<&'a [f64]>,
    pub span: usize,
    pub degree: usize,
}

impl Kernel<'_> {
    /// Contiguous window of the `span` points nearest to `x`.
    fn window(&self, x: f64) -> (usize, usize) {
        let n = self.xs.len();
        if self.span >= n {
            return (0, n);
        }
        let q = self.span;
        let pos = self.xs.partition_point(|&v| v < x);
        let mut lo = pos.saturating_sub(q / 2).min(n - q);
        while lo > 0 && x - self.xs[lo - 1] < self.xs[lo + q - 1] - x {
            lo -= 1;
        }
        while lo + q < n && self.xs[lo + q] - x < x - self.xs[lo] {
            lo += 1;
        }
        (lo, lo + q)
    }

    /// Returns the fitted value and whether the requested degree was used.
    pub fn fit_at(&self, x: f64) -> (f64, bool) {
        let (lo, hi) = self.window(x);
        let n = self.xs.len();
        let mut h = (x - self.xs[lo]).abs().max((self.xs[hi - 1] - x).abs());
        if self.span > n {
            h += ((self.span - n) / 2) as f64;
        }

        // weighted moments of the centred abscissa, up to order 2·degree
        let mut s = [0.0f64; 5];
        let mut t = [0.0f64; 3];
        let mut wsum_window = 0.0;
        let mut ysum_window = 0.0;
        for j in lo..hi {
            let d = self.xs[j] - x;
            let mut w = if h > 0.0 { tricube(d.abs() / h) } else { 1.0 };
            if let Some(r) = self.robustness {
                w *= r[j];
            }
            wsum_window += 1.0;
            ysum_window += self.ys[j];
            if w == 0.0 {
                continue;
            }
            let y = self.ys[j];
            let mut p = w;
            for k in 0..=2 * self.degree {
                s[k] += p;
                if k <= self.degree {
                    t[k] += p * y;
                }
                p *= d;
            }
        }

        if !(s[0] > 0.0) {
            // every point carries zero weight: plain window mean
            return (ysum_window / wsum_window, false);
        }
        let mut degree = self.degree;
        loop {
            if degree == 0 {
                return (t[0] / s[0], degree == self.degree);
            }
            if let Some(v) = solve_normal(&s, &t, degree) {
                return (v, degree == self.degree);
            }
            degree -= 1;
        }
    }
}

/// Solves the `(degree+1)²` normal equations with Hankel matrix
/// `A[i][j] = s[i+j]` and returns the intercept, or `None` when the matrix
/// is numerically rank-deficient.
fn solve_normal(s: &[f64; 5], t: &[f64; 3], degree: usize) -> Option<f64> {
    let m = degree + 1;
    let mut a = [[0.0f64; 4]; 3];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = s[i + j];
        }
        a[i][m] = t[i];
    }
    let scale = (0..m).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    // Gaussian elimination with partial pivoting; equilibrate rows by their diagonal
    let diag: Vec<f64> = (0..m).map(|i| a[i][i]).collect();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return None;
    }
    for i in 0..m {
        let r = 1.0 / diag[i].sqrt();
        for j in 0..m {
            a[i][j] *= r / diag[j].sqrt();
        }
        a[i][m] *= r;
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..m {
            let f = a[row][col] / a[col][col];
            for k in col..=m {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut beta = [0.0f64; 3];
    for i in (0..m).rev() {
        let mut acc = a[i][m];
        for k in i + 1..m {
            acc -= a[i][k] * beta[k];
        }
        beta[i] = acc / a[i][i];
    }
    // undo the column scaling; the intercept is coefficient 0
    let v = beta[0] / diag[0].sqrt();
    v.is_finite().then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    /// Independent oracle: global weighted least squares by explicit
    /// Vandermonde normal equations solved with Cramer's rule.
    fn global_quadratic_fit(xs: &[f64], ys: &[f64], at: f64) -> f64 {
        let mut m = [[0.0; 3]; 3];
        let mut r = [0.0; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let row = [1.0, x, x * x];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += row[i] * row[j];
                }
                r[i] += row[i] * y;
            }
        }
        let det = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let d = det(m);
        let mut coef = [0.0; 3];
        for k in 0..3 {
            let mut mk = m;
            for i in 0..3 {
                mk[i][k] = r[i];
            }
            coef[k] = det(mk) / d;
        }
        coef[0] + coef[1] * at + coef[2] * at * at
    }

    #[test]
    fn constant_is_fixed_point() {
        let xs = grid(20);
        let ys = vec![3.25; 20];
        for degree in 0..=2 {
            let out = loess_smooth(&xs, &ys, &LoessParams::new(7, degree), &xs).unwrap();
            assert!(out.values.iter().all(|v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn linear_reproduced_by_degree_one() {
        let xs: Vec<f64> = (0..30).map(|i| 0.5 * i as f64 + 0.1 * (i as f64).sin()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 + 0.75 * x).collect();
        for span in [3, 5, 9, 29] {
            let out = loess_smooth(&xs, &ys, &LoessParams::new(span, 1), &xs).unwrap();
            for (v, x) in out.values.iter().zip(&xs) {
                assert!((v - (-2.0 + 0.75 * x)).abs() <= 1e-10, "span {span}");
            }
        }
    }

    #[test]
    fn quadratic_full_window_matches_least_squares_oracle() {
        let xs = grid(7);
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let out = loess_smooth(&xs, &ys, &LoessParams::new(7, 2), &xs).unwrap();
        for (v, x) in out.values.iter().zip(&xs) {
            assert!((v - global_quadratic_fit(&xs, &ys, *x)).abs() <= 1e-10);
            assert!((v - x * x).abs() <= 1e-10);
        }
    }

    #[test]
    fn errors() {
        let xs = grid(4);
        assert_eq!(
            loess_smooth(&xs, &[1.0; 4], &LoessParams::new(5, 1), &xs),
            Err(LoessError::InsufficientData { len: 4, span: 5 })
        );
        assert!(matches!(
            loess_smooth(&xs, &[1.0; 4], &LoessParams::new(4, 1), &xs),
            Err(LoessError::InvalidParams(_))
        ));
        assert!(matches!(
            loess_smooth(&[0.0, 0.0, 1.0], &[1.0; 3], &LoessParams::new(3, 0), &[0.0]),
            Err(LoessError::NotIncreasing(1))
        ));
        let bad_w = LoessParams::new(3, 0).with_weights(vec![1.0, 2.0, 1.0, 1.0]);
        assert!(matches!(loess_smooth(&xs, &[1.0; 4], &bad_w, &xs), Err(LoessError::InvalidParams(_))));
    }

    #[test]
    fn singular_window_falls_back_to_mean() {
        // only the centre point has weight: linear fit is rank-deficient
        let xs = grid(5);
        let ys = [0.0, 1.0, 5.0, 1.0, 0.0];
        let w = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        let out = loess_smooth(&xs, &ys, &LoessParams::new(5, 1).with_weights(w), &[2.0]).unwrap();
        assert_eq!(out.values, vec![5.0]);
        assert_eq!(out.singular_fallbacks, vec![0]);
    }

    #[test]
    fn extrapolates_outside_range() {
        let xs = grid(10);
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x).collect();
        let out = loess_smooth(&xs, &ys, &LoessParams::new(5, 1), &[-1.0, 10.0]).unwrap();
        assert!((out.values[0] + 1.0).abs() < 1e-10);
        assert!((out.values[1] - 21.0).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
            (12usize..40).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-50.0f64..50.0, n),
                    proptest::collection::vec(-50.0f64..50.0, n),
                    proptest::collection::vec(0.05f64..1.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn linear_in_ys((y1, y2, w) in series(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let xs = grid(y1.len());
                let p = LoessParams::new(7, 2).with_weights(w);
                let s1 = loess_smooth(&xs, &y1, &p, &xs).unwrap().values;
                let s2 = loess_smooth(&xs, &y2, &p, &xs).unwrap().values;
                let combo: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
                let sc = loess_smooth(&xs, &combo, &p, &xs).unwrap().values;
                for i in 0..xs.len() {
                    prop_assert!((sc[i] - (a * s1[i] + b * s2[i])).abs() <= 1e-9);
                }
            }

            #[test]
            fn unit_weights_match_no_weights((y, _, _) in series(), degree in 0usize..=2) {
                let xs = grid(y.len());
                let plain = loess_smooth(&xs, &y, &LoessParams::new(9, degree), &xs).unwrap().values;
                let ones = LoessParams::new(9, degree).with_weights(vec![1.0; y.len()]);
                let weighted = loess_smooth(&xs, &y, &ones, &xs).unwrap().values;
                prop_assert_eq!(plain, weighted);
            }

            #[test]
            fn translation_invariant((y, _, _) in series(), shift in -1000.0f64..1000.0, degree in 0usize..=2) {
                let xs = grid(y.len());
                let moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
                let a = loess_smooth(&xs, &y, &LoessParams::new(9, degree), &xs).unwrap().values;
                let b = loess_smooth(&moved, &y, &LoessParams::new(9, degree), &moved).unwrap().values;
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
                }
            }

            #[test]
            fn polynomial_reproduction(c in proptest::array::uniform3(-5.0f64..5.0), degree in 0usize..=2, n in 10usize..30) {
                let xs = grid(n);
                let ys: Vec<f64> = xs.iter().map(|x| (0..=degree).map(|k| c[k] * x.powi(k as i32)).sum()).collect();
                let out = loess_smooth(&xs, &ys, &LoessParams::new(9, degree), &xs).unwrap().values;
                for (v, y) in out.iter().zip(&ys) {
                    prop_assert!((v - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }
    }
}
