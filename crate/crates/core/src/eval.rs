//! Forecast accuracy metrics, Wilcoxon signed-rank test, boxplot statistics
//! and the repeated-training experiment runner.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::pipeline::{ModelSpec, PipelineConfig, PipelineError, Prepared, TrainedModel};
use crate::timeseries::Dataset;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("actual value is zero at index {0}; MAPE is undefined there")]
    ZeroActual(usize),
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty input")]
    Empty,
    #[error("need at least 5 non-zero differences, got {0}")]
    TooFewPairs(usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("p-value {0} outside [0, 1]")]
    Domain(f64),
}

fn check_lengths(actual: &[f64], predicted: &[f64]) -> Result<(), EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mean absolute percentage error, in percent.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64, EvalError> {
    check_lengths(actual, predicted)?;
    if let Some(i) = actual.iter().position(|&y| y == 0.0) {
        return Err(EvalError::ZeroActual(i));
    }
    let sum: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p).abs() / y).sum();
    Ok(sum / actual.len() as f64 * 100.0)
}

/// Root mean squared error.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64, EvalError> {
    check_lengths(actual, predicted)?;
    let sum: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((sum / actual.len() as f64).sqrt())
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Largest number of non-zero pairs handled with the exact null distribution.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

/// Outcome of a two-sided signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Ranks of `|d|` with ties sharing the average rank, returned doubled so
/// that half ranks stay integral.
pub fn doubled_ranks(abs_diffs: &[f64]) -> Vec<u64> {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs_diffs[i].total_cmp(&abs_diffs[j]));
    let mut ranks = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && abs_diffs[order[j]] == abs_diffs[order[i]] {
            j += 1;
        }
        // ranks i+1..=j averaged, doubled: (i+1 + j)
        let r = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Exact two-sided p-value from the null distribution of the doubled
/// positive-rank sum. `counts[s]` is the number of sign assignments giving
/// doubled statistic `s`.
pub fn two_sided_p_from_counts(counts: &[u64], observed: u64, n: usize) -> f64 {
    let total = 2f64.powi(n as i32);
    let le: u64 = counts[..=observed as usize].iter().sum();
    let ge: u64 = counts[observed as usize..].iter().sum();
    (2.0 * le.min(ge) as f64 / total).min(1.0)
}

/// Null distribution of the doubled statistic by dynamic programming over ranks.
fn signed_rank_counts(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. Up to [`EXACT_WILCOXON_MAX_N`] remaining
/// pairs the exact null distribution is used (ties keep their average ranks);
/// beyond that, the normal approximation with tie-corrected variance and a
/// continuity correction.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            actual: xs.len(),
            predicted: ys.len(),
        });
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(EvalError::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(EvalError::TooFewPairs(n));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let observed: u64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_plus = observed as f64 / 2.0;

    if n <= EXACT_WILCOXON_MAX_N {
        let counts = signed_rank_counts(&ranks);
        return Ok(WilcoxonResult {
            w_plus,
            n,
            p_value: two_sided_p_from_counts(&counts, observed, n),
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let dev = (w_plus - mean).abs();
    let z = (dev - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0);
    Ok(WilcoxonResult {
        w_plus,
        n,
        p_value: p,
        exact: false,
    })
}

/// Significance stars: `****` p ≤ 1e-4, `***` ≤ 1e-3, `**` ≤ 1e-2, `*` ≤ 0.05.
pub fn stars(p: f64) -> Result<&'static str, EvalError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EvalError::Domain(p));
    }
    Ok(if p <= 0.0001 {
        "****"
    } else if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    })
}

// ---------------------------------------------------------------------------
// Summary statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64], kind: VarianceKind) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    match kind {
        VarianceKind::Population => ss / values.len() as f64,
        VarianceKind::Sample if values.len() > 1 => ss / (values.len() - 1) as f64,
        VarianceKind::Sample => 0.0,
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Tukey boxplot summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values inside the 1.5·IQR fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxplotStats {
    pub fn from_samples(values: &[f64]) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile(&sorted, 0.25);
        let median = quantile(&sorted, 0.5);
        let q3 = quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = sorted.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence).collect();
        let outliers = sorted.iter().copied().filter(|v| *v < lo_fence || *v > hi_fence).collect();
        Ok(Self {
            min: sorted[0],
            q1,
            median,
            q3,
            max: sorted[sorted.len() - 1],
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub variance: f64,
    pub boxplot: BoxplotStats,
}

impl MetricSummary {
    fn from_samples(values: &[f64], kind: VarianceKind) -> Result<Self, EvalError> {
        Ok(Self {
            mean: mean(values),
            variance: variance(values, kind),
            boxplot: BoxplotStats::from_samples(values)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub model_id: String,
    pub run_index: usize,
    pub mape: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub mape: MetricSummary,
    pub rmse: MetricSummary,
}

/// One off-diagonal entry of a p-value matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub p_value: Option<f64>,
    pub stars: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Square matrix over models in report order; diagonal entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub models: Vec<String>,
    pub entries: Vec<Vec<Option<PairTest>>>,
}

impl PValueMatrix {
    /// Pairwise tests of `samples[i]` against `samples[j]`, paired by index.
    pub fn build(models: &[String], samples: &[Vec<f64>]) -> Self {
        let k = models.len();
        let mut entries = vec![vec![None; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let test = match wilcoxon_signed_rank(&samples[i], &samples[j]) {
                    Ok(r) => PairTest {
                        p_value: Some(r.p_value),
                        stars: stars(r.p_value).unwrap_or("").to_string(),
                        note: None,
                    },
                    Err(e) => PairTest {
                        p_value: None,
                        stars: String::new(),
                        note: Some(e.to_string()),
                    },
                };
                entries[i][j] = Some(test.clone());
                entries[j][i] = Some(test);
            }
        }
        Self {
            models: models.to_vec(),
            entries,
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<&PairTest> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        self.entries[i][j].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_runs: usize,
    pub master_seed: u64,
    pub train_hours: usize,
    pub test_hours: usize,
    pub variance: VarianceKind,
    pub wilcoxon: String,
    pub pairing: String,
    /// ARIMA order chosen for the trend, when a SEA model was trained.
    pub trend_arima_order: Option<[usize; 3]>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub models: Vec<ModelSummary>,
    pub samples: Vec<MetricSample>,
    pub p_values_mape: PValueMatrix,
    pub p_values_rmse: PValueMatrix,
    /// Failures tolerated under `keep_going`, as `(model_id, run_index, message)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<(String, usize, String)>,
    /// Run-0 predictions per model in MW, for plotting. Not part of the JSON.
    #[serde(skip)]
    pub predictions: BTreeMap<String, Vec<f64>>,
}

impl EvalReport {
    pub fn summary(&self, model_id: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// Flat CSV of every sample.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("model_id,run_index,mape,rmse\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{},{}\n", s.model_id, s.run_index, s.mape, s.rmse));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("n_runs must be >= 2, got {0}")]
    TooFewRuns(usize),
    #[error("no model specs given")]
    NoSpecs,
    #[error("{model_id} run {run_index}: {source}")]
    Run {
        model_id: String,
        run_index: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("{model_id} run {run_index}: {source}")]
    Metric {
        model_id: String,
        run_index: usize,
        source: EvalError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("every run failed")]
    NothingSucceeded,
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub n_runs: usize,
    pub master_seed: u64,
    pub variance: VarianceKind,
    pub keep_going: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            n_runs: 20,
            master_seed: 0,
            variance: VarianceKind::Population,
            keep_going: false,
        }
    }
}

struct RunOutcome {
    model_id: String,
    run_index: usize,
    result: Result<(f64, f64, Vec<f64>), ExperimentError>,
}

/// Trains every spec `n_runs` times (seed `master_seed + run`), scores each
/// run on the test set and aggregates the results.
///
/// Runs execute on the current rayon pool and are collected back into
/// `(spec order, run index)` order before aggregation.
pub fn run_experiment(
    train: &Dataset,
    test: &Dataset,
    specs: &[ModelSpec],
    config: &PipelineConfig,
    options: &ExperimentOptions,
) -> Result<EvalReport, ExperimentError> {
    use rayon::prelude::*;

    if options.n_runs < 2 {
        return Err(ExperimentError::TooFewRuns(options.n_runs));
    }
    if specs.is_empty() {
        return Err(ExperimentError::NoSpecs);
    }
    // decomposition and the trend model do not depend on the seed
    let needs_sea = specs.iter().any(|s| !s.is_baseline());
    let prepared = if needs_sea { Some(Prepared::new(train, config)?) } else { None };

    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..options.n_runs).map(move |r| (s, r)))
        .collect();
    let actual = test.demand.values();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(s, run)| {
            let spec = &specs[s];
            let seed = options.master_seed.wrapping_add(run as u64);
            let tag = |e: PipelineError| ExperimentError::Run {
                model_id: spec.id().to_string(),
                run_index: run,
                source: Box::new(e),
            };
            let result = (|| {
                let model = TrainedModel::train(train, spec, config, seed, prepared.as_ref()).map_err(tag)?;
                let predicted = model.predict(test).map_err(tag)?.total;
                let metric = |e| ExperimentError::Metric {
                    model_id: spec.id().to_string(),
                    run_index: run,
                    source: e,
                };
                let m = mape(actual, predicted.values()).map_err(metric)?;
                let r = rmse(actual, predicted.values()).map_err(metric)?;
                Ok((m, r, predicted.values().to_vec()))
            })();
            RunOutcome {
                model_id: spec.id().to_string(),
                run_index: run,
                result,
            }
        })
        .collect();

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut predictions = BTreeMap::new();
    for o in outcomes {
        match o.result {
            Ok((m, r, pred)) => {
                if o.run_index == 0 {
                    predictions.insert(o.model_id.clone(), pred);
                }
                samples.push(MetricSample {
                    model_id: o.model_id,
                    run_index: o.run_index,
                    mape: m,
                    rmse: r,
                });
            }
            Err(e) if options.keep_going => failures.push((o.model_id, o.run_index, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(ExperimentError::NothingSucceeded);
    }

    let ids: Vec<String> = specs.iter().map(|s| s.id().to_string()).collect();
    let mut models = Vec::new();
    let mut mape_cols = Vec::new();
    let mut rmse_cols = Vec::new();
    let mut reported = Vec::new();
    for id in &ids {
        // index pairing: a failed run leaves a hole, so only complete runs are paired
        let mut by_run: Vec<Option<(f64, f64)>> = vec![None; options.n_runs];
        for s in samples.iter().filter(|s| &s.model_id == id) {
            by_run[s.run_index] = Some((s.mape, s.rmse));
        }
        let mapes: Vec<f64> = by_run.iter().flatten().map(|v| v.0).collect();
        let rmses: Vec<f64> = by_run.iter().flatten().map(|v| v.1).collect();
        if mapes.is_empty() {
            continue;
        }
        models.push(ModelSummary {
            model_id: id.clone(),
            mape: MetricSummary::from_samples(&mapes, options.variance).map_err(|e| ExperimentError::Metric {
                model_id: id.clone(),
                run_index: 0,
                source: e,
            })?,
            rmse: MetricSummary::from_samples(&rmses, options.variance).map_err(|e| ExperimentError::Metric {
                model_id: id.clone(),
                run_index: 0,
                source: e,
            })?,
        });
        mape_cols.push(by_run.iter().map(|v| v.map(|v| v.0)).collect::<Vec<_>>());
        rmse_cols.push(by_run.iter().map(|v| v.map(|v| v.1)).collect::<Vec<_>>());
        reported.push(id.clone());
    }
    let complete: Vec<usize> = (0..options.n_runs)
        .filter(|&r| mape_cols.iter().all(|c| c[r].is_some()))
        .collect();
    let pick = |cols: &[Vec<Option<f64>>]| -> Vec<Vec<f64>> {
        cols.iter()
            .map(|c| complete.iter().map(|&r| c[r].unwrap_or(f64::NAN)).collect())
            .collect()
    };

    let trend_arima_order = prepared.as_ref().map(|p| {
        let o = p.trend_model().order;
        [o.p, o.d, o.q]
    });
    Ok(EvalReport {
        metadata: ReportMetadata {
            n_runs: options.n_runs,
            master_seed: options.master_seed,
            train_hours: train.len(),
            test_hours: test.len(),
            variance: options.variance,
            wilcoxon: "two-sided signed-rank; exact null distribution up to 25 pairs, normal approximation above"
                .into(),
            pairing: "runs paired by run index (shared seed)".into(),
            trend_arima_order,
            config: config.clone(),
        },
        models,
        samples,
        p_values_mape: PValueMatrix::build(&reported, &pick(&mape_cols)),
        p_values_rmse: PValueMatrix::build(&reported, &pick(&rmse_cols)),
        failures,
        predictions,
    })
}
