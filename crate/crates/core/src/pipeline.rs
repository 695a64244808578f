//! Decompose, predict each component, recompose.
//!
//! A SEA model splits training demand with the STL cascade, trains Elman
//! networks on the seasonal part (one per period for structure A, one on the
//! summed seasonals for structure B) and an ARIMA model on the trend. Test
//! predictions are the sum of every stream. The baseline is a single deep
//! Elman network on raw demand.
//!
//! At test time the seasonal lags roll forward on the model's own outputs,
//! because the test series cannot be decomposed causally. `oracle_lags`
//! switches to teacher forcing for diagnostics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arima::{self, ArimaError, ArimaModel, ArimaOrder, ForecastState, OrderGrid};
use crate::elman::{build_supervised_from, lagged_input, ElmanConfig, ElmanError, ElmanNetwork, Stepper};
use crate::stl::{cascade_decompose_with, CascadeDecomposition, CascadeOrder, StlError, StlParams};
use crate::timeseries::{
    fit_normalizer, format_timestamp, parse_timestamp, Dataset, Normalizer, TimeSeries, TimeSeriesError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("decomposition: {0}")]
    Decomposition(#[source] StlError),
    #[error("training {stream}: {source}")]
    Training {
        stream: String,
        #[source]
        source: ElmanError,
    },
    #[error("trend fit: {0}")]
    Fit(#[source] ArimaError),
    #[error("test data starts at {found} but training ended at {expected}")]
    Alignment { expected: String, found: String },
    #[error("missing exogenous data: {0}")]
    MissingExogenous(String),
    #[error("unknown model id {0:?} (expected one of A-1, A-2, A-4, B-1, B-2, B-4, ENN)")]
    InvalidSpec(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("training data of length {len} is too short (need {required})")]
    TooShort { len: usize, required: usize },
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
    #[error("model bundle: {0}")]
    Bundle(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// Model grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// One network per seasonal period.
    A,
    /// One network on the summed seasonals.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeaStructure {
    pub variant: Variant,
    pub hidden_layers_per_enn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sea(SeaStructure),
    /// Plain network on raw demand; its depth comes from the config.
    Baseline,
}

/// One entry of the model grid, identified by its id string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelSpec {
    kind: ModelKind,
}

impl ModelSpec {
    pub const IDS: [&'static str; 7] = ["A-1", "A-2", "A-4", "B-1", "B-2", "B-4", "ENN"];

    pub fn parse(id: &str) -> Result<Self> {
        let sea = |variant, layers| ModelKind::Sea(SeaStructure {
            variant,
            hidden_layers_per_enn: layers,
        });
        let kind = match id.trim() {
            "A-1" => sea(Variant::A, 1),
            "A-2" => sea(Variant::A, 2),
            "A-4" => sea(Variant::A, 4),
            "B-1" => sea(Variant::B, 1),
            "B-2" => sea(Variant::B, 2),
            "B-4" => sea(Variant::B, 4),
            "ENN" => ModelKind::Baseline,
            other => return Err(PipelineError::InvalidSpec(other.to_string())),
        };
        Ok(Self { kind })
    }

    /// Every model of the grid, baseline last.
    pub fn all() -> Vec<Self> {
        Self::IDS.iter().map(|id| Self::parse(id).expect("known id")).collect()
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            ModelKind::Baseline => "ENN",
            ModelKind::Sea(s) => match (s.variant, s.hidden_layers_per_enn) {
                (Variant::A, 1) => "A-1",
                (Variant::A, 2) => "A-2",
                (Variant::A, _) => "A-4",
                (Variant::B, 1) => "B-1",
                (Variant::B, 2) => "B-2",
                (Variant::B, _) => "B-4",
            },
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self.kind, ModelKind::Baseline)
    }

    pub fn structure(&self) -> Option<SeaStructure> {
        match self.kind {
            ModelKind::Sea(s) => Some(s),
            ModelKind::Baseline => None,
        }
    }

    pub fn hidden_layers(&self, config: &PipelineConfig) -> usize {
        match self.kind {
            ModelKind::Sea(s) => s.hidden_layers_per_enn,
            ModelKind::Baseline => config.baseline_layers,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = PipelineError;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ModelSpec> for String {
    fn from(s: ModelSpec) -> String {
        s.id().to_string()
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What the lag inputs of a seasonal network are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagSource {
    /// Lags of the component the network predicts.
    #[default]
    Component,
    /// Lags of total demand.
    RawDemand,
}

impl FromStr for LagSource {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(Self::Component),
            "raw_demand" => Ok(Self::RawDemand),
            other => Err(PipelineError::Config(format!(
                "lag_source must be component or raw_demand, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cascade periods, strictly increasing.
    pub periods: Vec<usize>,
    pub seasonal_span: usize,
    pub stl_inner_iterations: usize,
    pub stl_outer_iterations: usize,
    pub cascade_order: CascadeOrder,
    pub lags: usize,
    pub hidden_nodes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub bptt_depth: usize,
    pub grad_clip: f64,
    pub baseline_layers: usize,
    pub lag_source: LagSource,
    /// Fixed trend order; `None` selects one by AIC over `arima_grid`.
    pub arima_order: Option<ArimaOrder>,
    pub arima_grid: OrderGrid,
    /// Non-causal teacher forcing at test time; diagnostics only.
    pub oracle_lags: bool,
    /// Training hours replayed to build network context before the test.
    pub warmup_hours: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            periods: vec![3, 4, 12, 24],
            seasonal_span: StlParams::DEFAULT_SEASONAL_SPAN,
            stl_inner_iterations: 2,
            stl_outer_iterations: 1,
            cascade_order: CascadeOrder::Ascending,
            lags: 4,
            hidden_nodes: 15,
            learning_rate: 0.01,
            epochs: 200,
            bptt_depth: 1,
            grad_clip: 5.0,
            baseline_layers: 8,
            lag_source: LagSource::Component,
            arima_order: None,
            arima_grid: OrderGrid::default(),
            oracle_lags: false,
            warmup_hours: 168,
        }
    }
}

impl PipelineConfig {
    pub fn stl_stages(&self) -> Vec<StlParams> {
        self.periods
            .iter()
            .map(|&p| {
                let mut s = StlParams::for_period(p).with_seasonal_span(self.seasonal_span);
                s.inner_iterations = self.stl_inner_iterations;
                s.outer_iterations = self.stl_outer_iterations;
                s
            })
            .collect()
    }

    pub fn elman(&self, layers: usize, seed: u64) -> ElmanConfig {
        ElmanConfig {
            num_hidden_layers: layers,
            hidden_nodes_per_layer: self.hidden_nodes,
            input_dim: self.lags + 3,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            bptt_depth: self.bptt_depth,
            seed,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.periods.is_empty() {
            return bad("at least one period is required".into());
        }
        if self.periods.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("periods must be strictly increasing, got {:?}", self.periods));
        }
        for s in self.stl_stages() {
            s.validate().map_err(PipelineError::Decomposition)?;
        }
        if self.lags == 0 {
            return bad("lags must be >= 1".into());
        }
        if self.baseline_layers == 0 {
            return bad("baseline_layers must be >= 1".into());
        }
        self.elman(1, 0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(o) = self.arima_order {
            ArimaOrder::new(o.p, o.d, o.q).map_err(PipelineError::Fit)?;
        }
        Ok(())
    }

    fn min_train_len(&self) -> usize {
        let max_period = self.periods.iter().copied().max().unwrap_or(1);
        (10 * 24).max(2 * max_period).max(self.lags + 2)
    }
}

// ---------------------------------------------------------------------------
// Seed-independent preparation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrendModel {
    pub model: ArimaModel,
    pub state: ForecastState,
    pub normalizer: Normalizer,
}

impl TrendModel {
    fn fit(trend: &[f64], config: &PipelineConfig) -> Result<Self> {
        let normalizer = fit_normalizer(trend)?;
        let z = normalizer.normalize(trend);
        let model = match config.arima_order {
            Some(o) => arima::fit(&z, o),
            None => arima::select_order_with_model(&z, config.arima_grid).map(|(_, m)| m),
        }
        .map_err(PipelineError::Fit)?;
        let state = model.state_after(&z).map_err(PipelineError::Fit)?;
        Ok(Self {
            model,
            state,
            normalizer,
        })
    }

    /// Single-shot forecast in demand units.
    pub fn forecast(&self, horizon: usize) -> Vec<f64> {
        let z = self.model.forecast_from_state(&self.state, horizon);
        self.normalizer.denormalize(&z)
    }
}

/// Weather normalizers for the three channels. A constant channel keeps its
/// mean and a unit scale.
fn exogenous_normalizers(train: &Dataset) -> Result<[Normalizer; 3]> {
    let mut out = [Normalizer::identity(); 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let values = train.exogenous_channel(c);
        *slot = match fit_normalizer(&values) {
            Ok(n) => n,
            Err(TimeSeriesError::DegenerateSeries(_)) if !values.is_empty() => Normalizer::new(values[0], 1.0)?,
            Err(e) => return Err(e.into()),
        };
    }
    Ok(out)
}

fn normalize_rows(rows: &[[f64; 3]], norms: &[Normalizer; 3]) -> Vec<[f64; 3]> {
    rows.iter()
        .map(|r| {
            [
                norms[0].normalize_value(r[0]),
                norms[1].normalize_value(r[1]),
                norms[2].normalize_value(r[2]),
            ]
        })
        .collect()
}

/// Everything about a training set that does not depend on the seed:
/// decomposition, normalizers and the trend model.
#[derive(Debug, Clone)]
pub struct Prepared {
    decomposition: CascadeDecomposition,
    trend: TrendModel,
    exogenous: [Normalizer; 3],
}

impl Prepared {
    pub fn new(train: &Dataset, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        check_train_len(train, config)?;
        let decomposition = cascade_decompose_with(&train.demand, &config.stl_stages(), config.cascade_order)
            .map_err(PipelineError::Decomposition)?;
        let trend = TrendModel::fit(decomposition.trend.values(), config)?;
        Ok(Self {
            decomposition,
            trend,
            exogenous: exogenous_normalizers(train)?,
        })
    }

    pub fn decomposition(&self) -> &CascadeDecomposition {
        &self.decomposition
    }

    pub fn trend_model(&self) -> &ArimaModel {
        &self.trend.model
    }
}

fn check_train_len(train: &Dataset, config: &PipelineConfig) -> Result<()> {
    let required = config.min_train_len();
    if train.len() < required {
        return Err(PipelineError::TooShort {
            len: train.len(),
            required,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Trained models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LagKind {
    Own,
    Demand,
}

/// One network and the data it needs to continue past the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPredictor {
    pub name: String,
    pub network: ElmanNetwork,
    pub normalizer: Normalizer,
    lag: LagKind,
    /// Normalized training values of the target, last `warmup + lags` hours.
    tail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub train_millis: u64,
    pub train_hours: usize,
    pub config: PipelineConfig,
}

/// Per-stream test predictions in demand units; `total` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBreakdown {
    pub streams: Vec<TimeSeries>,
    pub total: TimeSeries,
}

/// A trained SEA model or baseline network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    spec: ModelSpec,
    streams: Vec<StreamPredictor>,
    trend: Option<TrendModel>,
    stl: Vec<StlParams>,
    exogenous: [Normalizer; 3],
    demand_normalizer: Normalizer,
    /// Raw training demand and weather, last `warmup + lags` hours.
    demand_tail: Vec<f64>,
    exogenous_tail: Vec<[f64; 3]>,
    train_end: NaiveDateTime,
    metadata: TrainingMetadata,
}

/// SEA models and the baseline share one representation.
pub type SeaModel = TrainedModel;

/// Trains a SEA model. `spec` must not be the baseline.
pub fn train_sea(train: &Dataset, spec: &ModelSpec, config: &PipelineConfig, seed: u64) -> Result<TrainedModel> {
    if spec.is_baseline() {
        return Err(PipelineError::InvalidSpec(format!("{} is not a SEA model", spec.id())));
    }
    TrainedModel::train(train, spec, config, seed, None)
}

/// Trains the plain network on raw demand.
pub fn train_baseline_enn(train: &Dataset, config: &PipelineConfig, seed: u64) -> Result<TrainedModel> {
    TrainedModel::train(train, &ModelSpec::parse("ENN")?, config, seed, None)
}

struct StreamJob {
    name: String,
    target: Vec<f64>,
    lag: LagKind,
    seed: u64,
}

impl TrainedModel {
    /// Trains `spec` on `train`. Reuses `prepared` when given; it must come
    /// from the same training set and config.
    pub fn train(
        train: &Dataset,
        spec: &ModelSpec,
        config: &PipelineConfig,
        seed: u64,
        prepared: Option<&Prepared>,
    ) -> Result<Self> {
        let started = Instant::now();
        config.validate()?;
        check_train_len(train, config)?;
        let demand = train.demand.values();
        let demand_normalizer = fit_normalizer(demand)?;

        let (jobs, trend, exogenous, stl) = match spec.kind {
            ModelKind::Baseline => {
                let jobs = vec![StreamJob {
                    name: "demand".into(),
                    target: demand.to_vec(),
                    lag: LagKind::Own,
                    seed,
                }];
                (jobs, None, exogenous_normalizers(train)?, Vec::new())
            }
            ModelKind::Sea(structure) => {
                let owned;
                let prep = match prepared {
                    Some(p) => p,
                    None => {
                        owned = Prepared::new(train, config)?;
                        &owned
                    }
                };
                if prep.decomposition.trend.len() != train.len() {
                    return Err(PipelineError::Config("prepared data belongs to a different training set".into()));
                }
                let lag = match config.lag_source {
                    LagSource::Component => LagKind::Own,
                    LagSource::RawDemand => LagKind::Demand,
                };
                let jobs = match structure.variant {
                    Variant::A => prep
                        .decomposition
                        .seasonals
                        .iter()
                        .map(|(&np, s)| StreamJob {
                            name: format!("s{np}"),
                            target: s.values().to_vec(),
                            lag,
                            seed: seed.wrapping_add(np as u64),
                        })
                        .collect(),
                    Variant::B => vec![StreamJob {
                        name: "seasonal".into(),
                        target: prep.decomposition.seasonal_sum(),
                        lag,
                        seed,
                    }],
                };
                (jobs, Some(prep.trend.clone()), prep.exogenous, config.stl_stages())
            }
        };

        let layers = spec.hidden_layers(config);
        let exo = normalize_rows(&train.exogenous_rows(), &exogenous);
        let demand_z = demand_normalizer.normalize(demand);
        let keep = (config.warmup_hours + config.lags).min(train.len());
        let streams = jobs
            .into_par_iter()
            .map(|job| {
                let tag = |source| PipelineError::Training {
                    stream: job.name.clone(),
                    source,
                };
                let normalizer = fit_normalizer(&job.target)?;
                let target = normalizer.normalize(&job.target);
                let lag_values = match job.lag {
                    LagKind::Own => &target,
                    LagKind::Demand => &demand_z,
                };
                let data = build_supervised_from(lag_values, &target, &exo, config.lags).map_err(tag)?;
                let mut network = ElmanNetwork::new(config.elman(layers, job.seed)).map_err(tag)?;
                network.fit(&data).map_err(tag)?;
                Ok(StreamPredictor {
                    name: job.name,
                    network,
                    normalizer,
                    lag: job.lag,
                    tail: target[target.len() - keep..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            spec: spec.clone(),
            streams,
            trend,
            stl,
            exogenous,
            demand_normalizer,
            demand_tail: demand[demand.len() - keep..].to_vec(),
            exogenous_tail: train.exogenous_rows()[train.len() - keep..].to_vec(),
            train_end: train.demand.end_exclusive(),
            metadata: TrainingMetadata {
                seed,
                train_millis: started.elapsed().as_millis() as u64,
                train_hours: train.len(),
                config: config.clone(),
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn streams(&self) -> &[StreamPredictor] {
        &self.streams
    }

    pub fn streams_mut(&mut self) -> &mut [StreamPredictor] {
        &mut self.streams
    }

    pub fn trend(&self) -> Option<&TrendModel> {
        self.trend.as_ref()
    }

    pub fn stl_params(&self) -> &[StlParams] {
        &self.stl
    }

    pub fn metadata(&self) -> &TrainingMetadata {
        &self.metadata
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.metadata.config
    }

    /// First hour after the training data.
    pub fn train_end(&self) -> NaiveDateTime {
        self.train_end
    }

    /// One-hour-ahead predictions over the whole test set.
    pub fn predict(&self, test: &Dataset) -> Result<PredictionBreakdown> {
        self.check_test(test)?;
        let config = &self.metadata.config;
        let actual = if config.oracle_lags { Some(self.oracle_actuals(test)?) } else { None };
        let mut forecasters: Vec<Box<dyn Forecaster + '_>> = self
            .streams
            .iter()
            .map(|s| Box::new(s.network.stepper()) as Box<dyn Forecaster + '_>)
            .collect();
        let trend = self.trend.as_ref().map(|t| t.forecast(test.len()));
        let raw = self.rollout(&mut forecasters, trend.as_deref(), test, actual.as_ref())?;
        self.assemble(test, raw, trend)
    }

    fn check_test(&self, test: &Dataset) -> Result<()> {
        if test.demand.start() != self.train_end {
            return Err(PipelineError::Alignment {
                expected: format_timestamp(self.train_end),
                found: format_timestamp(test.demand.start()),
            });
        }
        if test.exogenous.len() != test.len() {
            return Err(PipelineError::MissingExogenous(format!(
                "{} weather rows for {} hours",
                test.exogenous.len(),
                test.len()
            )));
        }
        Ok(())
    }

    /// Normalized true lag values over the test period: per stream for
    /// component lags, demand otherwise. Components come from decomposing
    /// the stored training tail together with the test demand.
    fn oracle_actuals(&self, test: &Dataset) -> Result<OracleLags> {
        let demand = self.demand_normalizer.normalize(test.demand.values());
        let needs_components = self.streams.iter().any(|s| s.lag == LagKind::Own) && self.trend.is_some();
        let mut per_stream = vec![None; self.streams.len()];
        if needs_components {
            let mut joined = self.demand_tail.clone();
            joined.extend_from_slice(test.demand.values());
            let start = test.demand.start() - chrono::Duration::hours(self.demand_tail.len() as i64);
            let series = TimeSeries::new("demand", start, joined)?;
            let config = &self.metadata.config;
            let d = cascade_decompose_with(&series, &self.stl, config.cascade_order)
                .map_err(PipelineError::Decomposition)?;
            let skip = self.demand_tail.len();
            for (i, s) in self.streams.iter().enumerate() {
                let values = if s.name == "seasonal" {
                    d.seasonal_sum()
                } else {
                    let np: usize = s.name[1..].parse().map_err(|_| PipelineError::Bundle(s.name.clone()))?;
                    d.seasonals
                        .get(&np)
                        .ok_or_else(|| PipelineError::Bundle(format!("no component for {}", s.name)))?
                        .values()
                        .to_vec()
                };
                per_stream[i] = Some(s.normalizer.normalize(&values[skip..]));
            }
        } else {
            // the baseline's own lags are the demand itself
            for (i, s) in self.streams.iter().enumerate() {
                if s.lag == LagKind::Own {
                    per_stream[i] = Some(s.normalizer.normalize(test.demand.values()));
                }
            }
        }
        Ok(OracleLags { per_stream, demand })
    }

    /// Warm-up over the training tail, then the hour-by-hour test loop.
    /// Returns each stream's outputs in demand units.
    fn rollout(
        &self,
        forecasters: &mut [Box<dyn Forecaster + '_>],
        trend: Option<&[f64]>,
        test: &Dataset,
        oracle: Option<&OracleLags>,
    ) -> Result<Vec<Vec<f64>>> {
        let lags = self.metadata.config.lags;
        let tag = |s: &StreamPredictor, source| PipelineError::Training {
            stream: s.name.clone(),
            source,
        };
        let tail_exo = normalize_rows(&self.exogenous_tail, &self.exogenous);
        let mut demand_hist = self.demand_normalizer.normalize(&self.demand_tail);
        let mut own_hist: Vec<Vec<f64>> = self.streams.iter().map(|s| s.tail.clone()).collect();

        for (s, f) in self.streams.iter().zip(forecasters.iter_mut()) {
            let lag_values = match s.lag {
                LagKind::Own => &s.tail,
                LagKind::Demand => &demand_hist,
            };
            for t in lags..lag_values.len() {
                f.warm(&lagged_input(lag_values, t, lags, &tail_exo[t])).map_err(|e| tag(s, e))?;
            }
        }

        let exo = normalize_rows(&test.exogenous_rows(), &self.exogenous);
        let mut outputs: Vec<Vec<f64>> = vec![Vec::with_capacity(test.len()); self.streams.len()];
        let mut z = vec![0.0; self.streams.len()];
        for t in 0..test.len() {
            let mut total = trend.map_or(0.0, |tr| tr[t]);
            for (i, (s, f)) in self.streams.iter().zip(forecasters.iter_mut()).enumerate() {
                let hist = match s.lag {
                    LagKind::Own => &own_hist[i],
                    LagKind::Demand => &demand_hist,
                };
                let input = lagged_input(hist, hist.len(), lags, &exo[t]);
                z[i] = f.step(&input).map_err(|e| tag(s, e))?;
                let value = s.normalizer.denormalize_value(z[i]);
                outputs[i].push(value);
                total += value;
            }
            for (i, s) in self.streams.iter().enumerate() {
                let next = match oracle.and_then(|o| o.per_stream[i].as_ref()) {
                    Some(actual) => actual[t],
                    None => z[i],
                };
                if s.lag == LagKind::Own {
                    own_hist[i].push(next);
                }
            }
            demand_hist.push(match oracle {
                Some(o) => o.demand[t],
                None => self.demand_normalizer.normalize_value(total),
            });
        }
        Ok(outputs)
    }

    fn assemble(&self, test: &Dataset, raw: Vec<Vec<f64>>, trend: Option<Vec<f64>>) -> Result<PredictionBreakdown> {
        let start = test.demand.start();
        let mut total = trend.clone().unwrap_or_else(|| vec![0.0; test.len()]);
        let mut streams = Vec::with_capacity(raw.len() + 1);
        for (s, values) in self.streams.iter().zip(raw) {
            for (acc, v) in total.iter_mut().zip(&values) {
                *acc += v;
            }
            streams.push(TimeSeries::new(s.name.clone(), start, values)?);
        }
        if let Some(tr) = trend {
            streams.push(TimeSeries::new("trend", start, tr)?);
        }
        Ok(PredictionBreakdown {
            streams,
            total: TimeSeries::new("prediction", start, total)?,
        })
    }
}

struct OracleLags {
    per_stream: Vec<Option<Vec<f64>>>,
    demand: Vec<f64>,
}

/// A stateful one-step predictor on the normalized scale.
trait Forecaster {
    fn step(&mut self, input: &[f64]) -> std::result::Result<f64, ElmanError>;

    /// Advances the state over a known training input.
    fn warm(&mut self, input: &[f64]) -> std::result::Result<(), ElmanError> {
        self.step(input).map(|_| ())
    }
}

impl Forecaster for Stepper<'_> {
    fn step(&mut self, input: &[f64]) -> std::result::Result<f64, ElmanError> {
        Stepper::step(self, input)
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

const BUNDLE_FORMAT: &str = "sea-bundle/1";
const MANIFEST: &str = "manifest.json";
const TREND_FILE: &str = "arima_trend.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    spec: ModelSpec,
    streams: Vec<StreamEntry>,
    trend: Option<TrendEntry>,
    stl: Vec<StlParams>,
    exogenous_normalizers: [Normalizer; 3],
    demand_normalizer: Normalizer,
    demand_tail: Vec<f64>,
    exogenous_tail: Vec<[f64; 3]>,
    train_end: String,
    metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamEntry {
    name: String,
    file: String,
    normalizer: Normalizer,
    lag: LagKind,
    tail: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrendEntry {
    file: String,
    normalizer: Normalizer,
}

impl TrainedModel {
    /// Writes `manifest.json` plus one file per component model into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| PipelineError::Bundle(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut streams = Vec::new();
        for s in &self.streams {
            let file = format!("enn_{}.json", s.name);
            std::fs::write(dir.join(&file), s.network.to_json()).map_err(io)?;
            streams.push(StreamEntry {
                name: s.name.clone(),
                file,
                normalizer: s.normalizer,
                lag: s.lag,
                tail: s.tail.clone(),
            });
        }
        let trend = match &self.trend {
            Some(t) => {
                std::fs::write(dir.join(TREND_FILE), t.model.to_json(&t.state)).map_err(io)?;
                Some(TrendEntry {
                    file: TREND_FILE.into(),
                    normalizer: t.normalizer,
                })
            }
            None => None,
        };
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            spec: self.spec.clone(),
            streams,
            trend,
            stl: self.stl.clone(),
            exogenous_normalizers: self.exogenous,
            demand_normalizer: self.demand_normalizer,
            demand_tail: self.demand_tail.clone(),
            exogenous_tail: self.exogenous_tail.clone(),
            train_end: format_timestamp(self.train_end),
            metadata: self.metadata.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::Bundle(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), text).map_err(io)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| PipelineError::Bundle(format!("{}: {e}", dir.join(name).display())))
        };
        let m: Manifest =
            serde_json::from_str(&read(MANIFEST)?).map_err(|e| PipelineError::Bundle(format!("{MANIFEST}: {e}")))?;
        if m.format != BUNDLE_FORMAT {
            return Err(PipelineError::Bundle(format!("unknown format {:?}", m.format)));
        }
        let mut streams = Vec::new();
        for e in m.streams {
            let network = ElmanNetwork::from_json(&read(&e.file)?).map_err(|source| PipelineError::Training {
                stream: e.name.clone(),
                source,
            })?;
            streams.push(StreamPredictor {
                name: e.name,
                network,
                normalizer: e.normalizer,
                lag: e.lag,
                tail: e.tail,
            });
        }
        let trend = match m.trend {
            Some(t) => {
                let (model, state) = ArimaModel::from_json(&read(&t.file)?).map_err(PipelineError::Fit)?;
                Some(TrendModel {
                    model,
                    state,
                    normalizer: t.normalizer,
                })
            }
            None => None,
        };
        let expected = match m.spec.structure() {
            None => 1,
            Some(s) if s.variant == Variant::B => 1,
            Some(_) => m.stl.len(),
        };
        if streams.len() != expected || trend.is_some() == m.spec.is_baseline() {
            return Err(PipelineError::Bundle(format!(
                "{} bundle has {} networks and {} trend model",
                m.spec,
                streams.len(),
                if trend.is_some() { "a" } else { "no" }
            )));
        }
        let train_end =
            parse_timestamp(&m.train_end).map_err(|e| PipelineError::Bundle(format!("train_end: {e}")))?;
        Ok(Self {
            spec: m.spec,
            streams,
            trend,
            stl: m.stl,
            exogenous: m.exogenous_normalizers,
            demand_normalizer: m.demand_normalizer,
            demand_tail: m.demand_tail,
            exogenous_tail: m.exogenous_tail,
            train_end,
            metadata: m.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{split_train_test, synthesize, SynthConfig};

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            periods: vec![3, 24],
            epochs: 3,
            hidden_nodes: 4,
            arima_order: Some(ArimaOrder { p: 1, d: 1, q: 0 }),
            warmup_hours: 48,
            ..PipelineConfig::default()
        }
    }

    fn data(hours: usize, test_hours: usize, seed: u64) -> (Dataset, Dataset, crate::timeseries::Synthetic) {
        let synth = synthesize(&SynthConfig::with_periods(&[3, 24], hours + test_hours, seed)).unwrap();
        let boundary = synth.dataset.demand.timestamp(hours);
        let (train, test) = split_train_test(&synth.dataset, boundary).unwrap();
        (train, test, synth)
    }

    #[test]
    fn spec_grid() {
        let a1 = ModelSpec::parse("A-1").unwrap();
        assert_eq!(
            a1.structure(),
            Some(SeaStructure {
                variant: Variant::A,
                hidden_layers_per_enn: 1
            })
        );
        let b2: ModelSpec = "B-2".parse().unwrap();
        assert_eq!(b2.structure().unwrap().variant, Variant::B);
        assert_eq!(b2.structure().unwrap().hidden_layers_per_enn, 2);
        let enn = ModelSpec::parse("ENN").unwrap();
        assert!(enn.is_baseline());
        assert_eq!(enn.hidden_layers(&PipelineConfig::default()), 8);
        assert_eq!(ModelSpec::all().len(), 7);
        assert!(matches!(ModelSpec::parse("C-1"), Err(PipelineError::InvalidSpec(_))));
        let json = serde_json::to_string(&a1).unwrap();
        assert_eq!(json, "\"A-1\"");
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), a1);
    }

    #[test]
    fn structure_shapes() {
        let (train, _, _) = data(600, 48, 1);
        let cfg = quick_config();
        let a = train_sea(&train, &ModelSpec::parse("A-1").unwrap(), &cfg, 3).unwrap();
        assert_eq!(a.streams().len(), 2);
        assert!(a.streams().iter().all(|s| s.network.config().input_dim == 7));
        assert!(a.trend().is_some());
        assert_eq!(a.streams()[0].network.config().seed, 3 + 3);
        assert_eq!(a.streams()[1].network.config().seed, 3 + 24);

        let b = train_sea(&train, &ModelSpec::parse("B-2").unwrap(), &cfg, 3).unwrap();
        assert_eq!(b.streams().len(), 1);
        assert_eq!(b.streams()[0].network.config().num_hidden_layers, 2);

        let e = train_baseline_enn(&train, &cfg, 3).unwrap();
        assert_eq!(e.streams().len(), 1);
        assert!(e.trend().is_none());
        let c = e.streams()[0].network.config();
        assert_eq!((c.num_hidden_layers, c.hidden_nodes_per_layer, c.input_dim), (8, 4, 7));
    }

    #[test]
    fn additivity_and_shape() {
        let (train, test, _) = data(600, 72, 2);
        let cfg = quick_config();
        for id in ["A-1", "B-1", "ENN"] {
            let m = TrainedModel::train(&train, &ModelSpec::parse(id).unwrap(), &cfg, 1, None).unwrap();
            let p = m.predict(&test).unwrap();
            assert_eq!(p.total.len(), test.len());
            assert_eq!(p.total.start(), test.demand.start());
            for t in 0..test.len() {
                let sum: f64 = p.streams.iter().map(|s| s.values()[t]).sum();
                assert!((sum - p.total.values()[t]).abs() <= 1e-9, "{id} at {t}");
            }
        }
    }

    #[test]
    fn zero_networks_give_trend_plus_biases() {
        let (train, test, _) = data(600, 48, 3);
        let mut m = train_sea(&train, &ModelSpec::parse("A-1").unwrap(), &quick_config(), 0).unwrap();
        let mut offset = 0.0;
        for (k, s) in m.streams_mut().iter_mut().enumerate() {
            let n = s.network.num_params();
            s.network.set_params(&vec![0.0; n]).unwrap();
            let bias = 0.25 * (k as f64 + 1.0);
            s.network.set_b_out(bias);
            offset += s.normalizer.denormalize_value(bias);
        }
        let p = m.predict(&test).unwrap();
        let trend = m.trend().unwrap().forecast(test.len());
        for t in 0..test.len() {
            assert!((p.total.values()[t] - trend[t] - offset).abs() <= 1e-9);
        }
    }

    /// Returns the normalized truth for each test hour and ignores its input.
    struct Truth {
        values: Vec<f64>,
        next: usize,
    }

    impl Forecaster for Truth {
        fn step(&mut self, _: &[f64]) -> std::result::Result<f64, ElmanError> {
            self.next += 1;
            Ok(self.values[self.next - 1])
        }

        fn warm(&mut self, _: &[f64]) -> std::result::Result<(), ElmanError> {
            Ok(())
        }
    }

    #[test]
    fn structure_b_with_true_components_reproduces_test() {
        let (train, test, synth) = data(600, 96, 4);
        let m = train_sea(&train, &ModelSpec::parse("B-1").unwrap(), &quick_config(), 0).unwrap();
        let n_train = train.len();
        let truth_sum: Vec<f64> = synth.truth.seasonal_sum()[n_train..].to_vec();
        let truth_trend: Vec<f64> = synth.truth.trend.values()[n_train..].to_vec();
        let s = &m.streams()[0];
        let mut forecasters: Vec<Box<dyn Forecaster>> = vec![Box::new(Truth {
            values: s.normalizer.normalize(&truth_sum),
            next: 0,
        })];
        let raw = m.rollout(&mut forecasters, Some(&truth_trend), &test, None).unwrap();
        let p = m.assemble(&test, raw, Some(truth_trend)).unwrap();
        for (a, b) in p.total.values().iter().zip(test.demand.values()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn deterministic_and_bundle_roundtrip() {
        let (train, test, _) = data(600, 48, 5);
        let cfg = quick_config();
        for id in ["A-1", "ENN"] {
            let spec = ModelSpec::parse(id).unwrap();
            let a = TrainedModel::train(&train, &spec, &cfg, 9, None).unwrap();
            let b = TrainedModel::train(&train, &spec, &cfg, 9, None).unwrap();
            assert_eq!(a.streams(), b.streams());
            let pa = a.predict(&test).unwrap();
            assert_eq!(pa, b.predict(&test).unwrap());

            let dir = tempfile::tempdir().unwrap();
            a.save(dir.path()).unwrap();
            let loaded = TrainedModel::load(dir.path()).unwrap();
            assert_eq!(loaded, a);
            assert_eq!(loaded.predict(&test).unwrap(), pa);
        }
    }

    #[test]
    fn prepared_matches_fresh_training() {
        let (train, test, _) = data(600, 48, 6);
        let cfg = quick_config();
        let spec = ModelSpec::parse("A-1").unwrap();
        let prep = Prepared::new(&train, &cfg).unwrap();
        let a = TrainedModel::train(&train, &spec, &cfg, 2, Some(&prep)).unwrap();
        let b = TrainedModel::train(&train, &spec, &cfg, 2, None).unwrap();
        assert_eq!(a.predict(&test).unwrap(), b.predict(&test).unwrap());
    }

    #[test]
    fn misaligned_test_is_rejected() {
        let (train, test, _) = data(600, 48, 7);
        let m = train_baseline_enn(&train, &quick_config(), 0).unwrap();
        let shifted = Dataset::new(
            TimeSeries::new(
                "d",
                test.demand.start() + chrono::Duration::hours(1),
                test.demand.values().to_vec(),
            )
            .unwrap(),
            test.exogenous.clone(),
        )
        .unwrap();
        assert!(matches!(m.predict(&shifted), Err(PipelineError::Alignment { .. })));
    }

    #[test]
    fn oracle_and_raw_lag_modes_run() {
        let (train, test, _) = data(600, 48, 8);
        for (oracle, source) in [(true, LagSource::Component), (false, LagSource::RawDemand), (true, LagSource::RawDemand)] {
            let cfg = PipelineConfig {
                oracle_lags: oracle,
                lag_source: source,
                ..quick_config()
            };
            for id in ["A-1", "B-1", "ENN"] {
                let m = TrainedModel::train(&train, &ModelSpec::parse(id).unwrap(), &cfg, 0, None).unwrap();
                let p = m.predict(&test).unwrap();
                assert!(p.total.values().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn short_training_set_is_rejected() {
        let (train, _, _) = data(200, 48, 9);
        assert!(matches!(
            train_baseline_enn(&train, &quick_config(), 0),
            Err(PipelineError::TooShort { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            periods: vec![24, 12],
            ..PipelineConfig::default()
        };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        let bad = PipelineConfig {
            lags: 0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
