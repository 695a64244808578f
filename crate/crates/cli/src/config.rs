//! Run configuration: built-in defaults, overlaid by a `key = value` file,
//! overlaid by command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use sea_core::arima::{ArimaOrder, OrderGrid};
use sea_core::eval::VarianceKind;
use sea_core::pipeline::{LagSource, ModelSpec, PipelineConfig};
use sea_core::stl::CascadeOrder;
use sea_core::timeseries::{format_timestamp, parse_timestamp};

/// Every key accepted in a config file or through `--set`, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset CSV path"),
    ("split", "first test hour (YYYY-MM-DDTHH:00); empty = last test_hours hours"),
    ("test_hours", "test length when split is empty"),
    ("models", "comma-separated model ids"),
    ("runs", "repetitions per model"),
    ("seed", "master seed"),
    ("variance", "population or sample"),
    ("out", "output directory"),
    ("jobs", "worker threads, 0 = all cores"),
    ("keep_going", "tolerate failed runs"),
    ("hours", "synthetic dataset length"),
    ("model_dir", "trained model bundle to predict with"),
    ("periods", "cascade periods, strictly increasing"),
    ("seasonal_span", "STL seasonal span (odd, >= 7)"),
    ("stl_inner_iterations", "STL inner passes"),
    ("stl_outer_iterations", "STL robustness passes"),
    ("cascade_order", "ascending or descending"),
    ("lags", "lagged inputs per network"),
    ("hidden_nodes", "nodes per hidden layer"),
    ("learning_rate", "SGD step size"),
    ("epochs", "training epochs"),
    ("bptt_depth", "truncated BPTT depth"),
    ("grad_clip", "gradient L2 clip"),
    ("baseline_layers", "hidden layers of the baseline network"),
    ("lag_source", "component or raw_demand"),
    ("oracle_lags", "teacher-force test lags (non-causal)"),
    ("warmup_hours", "training hours replayed before the test"),
    ("arima_order", "fixed trend order p,d,q; empty = AIC selection"),
    ("arima_max_p", "AIC grid limit for p"),
    ("arima_max_d", "AIC grid limit for d"),
    ("arima_max_q", "AIC grid limit for q"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub split: Option<NaiveDateTime>,
    pub test_hours: usize,
    pub models: Vec<ModelSpec>,
    pub runs: usize,
    pub seed: u64,
    pub variance: VarianceKind,
    pub out: PathBuf,
    pub jobs: usize,
    pub keep_going: bool,
    pub hours: usize,
    pub model_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            split: None,
            test_hours: 8760,
            models: ModelSpec::all(),
            runs: 20,
            seed: 0,
            variance: VarianceKind::Population,
            out: PathBuf::from("out"),
            jobs: 0,
            keep_going: false,
            hours: 26304 + 8760,
            model_dir: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let p = &mut self.pipeline;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "split" => {
                self.split = if value.is_empty() {
                    None
                } else {
                    Some(parse_timestamp(value).map_err(|e| format!("split: {e}"))?)
                }
            }
            "test_hours" => self.test_hours = parse(key, value)?,
            "models" => {
                let models = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| ModelSpec::parse(s).map_err(|e| format!("models: {e}")))
                    .collect::<Result<Vec<_>, _>>()?;
                if models.is_empty() {
                    return Err("models: at least one model id is required".into());
                }
                self.models = models;
            }
            "runs" => self.runs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variance" => {
                self.variance = match value {
                    "population" => VarianceKind::Population,
                    "sample" => VarianceKind::Sample,
                    _ => return Err(format!("variance: expected population or sample, got {value:?}")),
                }
            }
            "out" => self.out = PathBuf::from(value),
            "jobs" => self.jobs = parse(key, value)?,
            "keep_going" => self.keep_going = parse_bool(key, value)?,
            "hours" => self.hours = parse(key, value)?,
            "model_dir" => self.model_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "periods" => p.periods = parse_list(key, value)?,
            "seasonal_span" => p.seasonal_span = parse(key, value)?,
            "stl_inner_iterations" => p.stl_inner_iterations = parse(key, value)?,
            "stl_outer_iterations" => p.stl_outer_iterations = parse(key, value)?,
            "cascade_order" => {
                p.cascade_order = match value {
                    "ascending" => CascadeOrder::Ascending,
                    "descending" => CascadeOrder::Descending,
                    _ => return Err(format!("cascade_order: expected ascending or descending, got {value:?}")),
                }
            }
            "lags" => p.lags = parse(key, value)?,
            "hidden_nodes" => p.hidden_nodes = parse(key, value)?,
            "learning_rate" => p.learning_rate = parse(key, value)?,
            "epochs" => p.epochs = parse(key, value)?,
            "bptt_depth" => p.bptt_depth = parse(key, value)?,
            "grad_clip" => p.grad_clip = parse(key, value)?,
            "baseline_layers" => p.baseline_layers = parse(key, value)?,
            "lag_source" => p.lag_source = value.parse::<LagSource>().map_err(|e| e.to_string())?,
            "oracle_lags" => p.oracle_lags = parse_bool(key, value)?,
            "warmup_hours" => p.warmup_hours = parse(key, value)?,
            "arima_order" => {
                p.arima_order = if value.is_empty() {
                    None
                } else {
                    let v: Vec<usize> = parse_list(key, value)?;
                    if v.len() != 3 {
                        return Err(format!("arima_order: expected p,d,q, got {value:?}"));
                    }
                    Some(ArimaOrder::new(v[0], v[1], v[2]).map_err(|e| format!("arima_order: {e}"))?)
                }
            }
            "arima_max_p" => p.arima_grid.max_p = parse(key, value)?,
            "arima_max_d" => p.arima_grid.max_d = parse(key, value)?,
            "arima_max_q" => p.arima_grid.max_q = parse(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value", i + 1))?;
            self.set(key.trim(), value).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Cross-field checks once every layer has been applied.
    pub fn validate(&self) -> Result<(), String> {
        self.pipeline.validate().map_err(|e| e.to_string())?;
        let g = self.pipeline.arima_grid;
        if g.max_p > ArimaOrder::MAX_P || g.max_d > ArimaOrder::MAX_D || g.max_q > ArimaOrder::MAX_Q {
            return Err(format!(
                "ARIMA grid ({},{},{}) exceeds the maxima ({},{},{})",
                g.max_p,
                g.max_d,
                g.max_q,
                ArimaOrder::MAX_P,
                ArimaOrder::MAX_D,
                ArimaOrder::MAX_Q
            ));
        }
        if g == (OrderGrid { max_p: 0, max_d: 0, max_q: 0 }) && self.pipeline.arima_order.is_none() {
            return Err("ARIMA grid contains no valid order".into());
        }
        if self.runs < 2 {
            return Err(format!("runs must be >= 2, got {}", self.runs));
        }
        if self.test_hours == 0 {
            return Err("test_hours must be >= 1".into());
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let p = &self.pipeline;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "data" => path(&self.data),
            "split" => self.split.map(format_timestamp).unwrap_or_default(),
            "test_hours" => self.test_hours.to_string(),
            "models" => join(&self.models),
            "runs" => self.runs.to_string(),
            "seed" => self.seed.to_string(),
            "variance" => match self.variance {
                VarianceKind::Population => "population".into(),
                VarianceKind::Sample => "sample".into(),
            },
            "out" => self.out.display().to_string(),
            "jobs" => self.jobs.to_string(),
            "keep_going" => self.keep_going.to_string(),
            "hours" => self.hours.to_string(),
            "model_dir" => path(&self.model_dir),
            "periods" => join(&p.periods),
            "seasonal_span" => p.seasonal_span.to_string(),
            "stl_inner_iterations" => p.stl_inner_iterations.to_string(),
            "stl_outer_iterations" => p.stl_outer_iterations.to_string(),
            "cascade_order" => match p.cascade_order {
                CascadeOrder::Ascending => "ascending".into(),
                CascadeOrder::Descending => "descending".into(),
            },
            "lags" => p.lags.to_string(),
            "hidden_nodes" => p.hidden_nodes.to_string(),
            "learning_rate" => p.learning_rate.to_string(),
            "epochs" => p.epochs.to_string(),
            "bptt_depth" => p.bptt_depth.to_string(),
            "grad_clip" => p.grad_clip.to_string(),
            "baseline_layers" => p.baseline_layers.to_string(),
            "lag_source" => match p.lag_source {
                LagSource::Component => "component".into(),
                LagSource::RawDemand => "raw_demand".into(),
            },
            "oracle_lags" => p.oracle_lags.to_string(),
            "warmup_hours" => p.warmup_hours.to_string(),
            "arima_order" => p.arima_order.map(|o| format!("{},{},{}", o.p, o.d, o.q)).unwrap_or_default(),
            "arima_max_p" => p.arima_grid.max_p.to_string(),
            "arima_max_d" => p.arima_grid.max_d.to_string(),
            "arima_max_q" => p.arima_grid.max_q.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// The effective configuration in the file format; re-reading it gives
    /// back the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, help) in KEYS {
            let _ = writeln!(out, "# {help}\n{key} = {}", self.value_of(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::default();
        c.set("models", "A-1, ENN").unwrap();
        c.set("arima_order", "1,1,1").unwrap();
        c.set("split", "2011-01-01T00:00").unwrap();
        c.set("learning_rate", "0.005").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
        let mut d = RunConfig::default();
        d.apply_text(&RunConfig::default().to_text(), "echo").unwrap();
        assert_eq!(d, RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("colour", "red").unwrap_err().contains("unknown config key"));
        assert!(c.set("epochs", "many").is_err());
        assert!(c.set("models", "A-3").is_err());
        assert!(c.set("arima_order", "1,1").is_err());
        let err = c.apply_text("epochs = 5\nnonsense\n", "f").unwrap_err();
        assert!(err.starts_with("f:2:"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nepochs = 7 # inline\n", "f").unwrap();
        assert_eq!(c.pipeline.epochs, 7);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.set("periods", "24,12").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("runs", "1").unwrap();
        assert!(c.validate().is_err());
    }
}
