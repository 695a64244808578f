//! Hourly series container, z-score normalization, CSV ingestion,
//! train/test splitting and a seeded synthetic-data generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::stl::CascadeDecomposition;

/// Timestamp layout used by every CSV file in this crate.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:00";

/// Exact header of the dataset CSV.
pub const CSV_HEADER: [&str; 5] = [
    "timestamp",
    "heat_demand_mw",
    "ambient_temp_c",
    "solar_radiation_wm2",
    "wind_speed_ms",
];

/// Periods the cascade (and the generator) know about.
pub const SUPPORTED_PERIODS: [usize; 4] = [3, 4, 12, 24];

#[derive(Debug, thiserror::Error)]
pub enum TimeSeriesError {
    #[error("series must contain at least one value")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("timestamp {0} is not aligned to the hour")]
    UnalignedTimestamp(NaiveDateTime),
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("invalid exogenous record at index {index}: {reason}")]
    InvalidExogenous { index: usize, reason: String },
    #[error("exogenous length {exogenous} does not match demand length {demand}")]
    LengthMismatch { demand: usize, exogenous: usize },
    #[error("I/O error")]
    Io(#[from] std::io::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("gap on line {line}: expected {expected}, found {found}")]
    Gap {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("split boundary {0} is outside the data span")]
    OutOfRange(NaiveDateTime),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, TimeSeriesError>;

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TimeSeriesError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Uniformly sampled hourly observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    name: String,
    start: NaiveDateTime,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, start: NaiveDateTime, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(TimeSeriesError::Empty);
        }
        if start.minute() != 0 || start.second() != 0 || start.nanosecond() != 0 {
            return Err(TimeSeriesError::UnalignedTimestamp(start));
        }
        check_finite(&values)?;
        Ok(Self {
            name: name.into(),
            start,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Timestamp of observation `index`.
    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::hours(index as i64)
    }

    /// First hour after the last observation.
    pub fn end_exclusive(&self) -> NaiveDateTime {
        self.timestamp(self.values.len())
    }

    /// Same timing, new values. Used for derived components.
    pub fn with_values(&self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(name, self.start, values)
    }
}

/// Weather observation aligned with one demand hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogenousRecord {
    /// °C
    pub ambient_temperature: f64,
    /// W/m²
    pub solar_radiation: f64,
    /// m/s
    pub wind_speed: f64,
}

impl ExogenousRecord {
    pub fn new(ambient_temperature: f64, solar_radiation: f64, wind_speed: f64) -> Result<Self> {
        let record = Self {
            ambient_temperature,
            solar_radiation,
            wind_speed,
        };
        record.validate(0)?;
        Ok(record)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| {
            Err(TimeSeriesError::InvalidExogenous {
                index,
                reason: reason.to_string(),
            })
        };
        if !self.as_array().iter().all(|v| v.is_finite()) {
            return bad("non-finite value");
        }
        if self.solar_radiation < 0.0 {
            return bad("negative solar radiation");
        }
        if self.wind_speed < 0.0 {
            return bad("negative wind speed");
        }
        Ok(())
    }

    /// `[temperature, solar, wind]`, the order used for network inputs.
    pub fn as_array(&self) -> [f64; 3] {
        [self.ambient_temperature, self.solar_radiation, self.wind_speed]
    }
}

/// Demand series plus index-aligned weather.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub demand: TimeSeries,
    pub exogenous: Vec<ExogenousRecord>,
}

impl Dataset {
    pub fn new(demand: TimeSeries, exogenous: Vec<ExogenousRecord>) -> Result<Self> {
        if exogenous.len() != demand.len() {
            return Err(TimeSeriesError::LengthMismatch {
                demand: demand.len(),
                exogenous: exogenous.len(),
            });
        }
        for (i, r) in exogenous.iter().enumerate() {
            r.validate(i)?;
        }
        Ok(Self { demand, exogenous })
    }

    pub fn len(&self) -> usize {
        self.demand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }

    /// Weather rows as `[temperature, solar, wind]`.
    pub fn exogenous_rows(&self) -> Vec<[f64; 3]> {
        self.exogenous.iter().map(ExogenousRecord::as_array).collect()
    }

    /// One weather channel (0 = temperature, 1 = solar, 2 = wind).
    pub fn exogenous_channel(&self, channel: usize) -> Vec<f64> {
        self.exogenous.iter().map(|r| r.as_array()[channel]).collect()
    }

    /// Writes the dataset using the ingestion schema.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| TimeSeriesError::Io(e.into());
        w.write_record(CSV_HEADER).map_err(io)?;
        for (i, (v, r)) in self.demand.values().iter().zip(&self.exogenous).enumerate() {
            w.write_record([
                self.demand.timestamp(i).format(TIMESTAMP_FORMAT).to_string(),
                v.to_string(),
                r.ambient_temperature.to_string(),
                r.solar_radiation.to_string(),
                r.wind_speed.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Parses a timestamp in the `YYYY-MM-DDTHH:00` layout.
pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let dt = NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M")
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))?;
    if dt.minute() != 0 {
        return Err(format!("timestamp {s:?} is not on the hour"));
    }
    Ok(dt)
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

/// Reads a dataset from a file path.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(File::open(path)?)
}

/// Reads a dataset, validating the header, every value and strict hourly spacing.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| TimeSeriesError::Schema(e.to_string()))?
        .clone();
    let found: Vec<&str> = header.iter().collect();
    if found != CSV_HEADER {
        return Err(TimeSeriesError::Schema(format!(
            "expected columns {}, found {}",
            CSV_HEADER.join(","),
            found.join(",")
        )));
    }

    let mut start = None;
    let mut previous: Option<NaiveDateTime> = None;
    let mut demand = Vec::new();
    let mut exogenous = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let record = record.map_err(|e| TimeSeriesError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != CSV_HEADER.len() {
            return Err(TimeSeriesError::Parse {
                line,
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), record.len()),
            });
        }
        let ts = parse_timestamp(&record[0]).map_err(|message| TimeSeriesError::Parse { line, message })?;
        let mut fields = [0.0; 4];
        for (k, slot) in fields.iter_mut().enumerate() {
            let raw = &record[k + 1];
            *slot = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| TimeSeriesError::Parse {
                    line,
                    message: format!("column {}: cannot parse {raw:?} as a finite number", CSV_HEADER[k + 1]),
                })?;
        }
        if let Some(prev) = previous {
            let expected = prev + Duration::hours(1);
            if ts != expected {
                return Err(TimeSeriesError::Gap {
                    line,
                    expected: format_timestamp(expected),
                    found: format_timestamp(ts),
                });
            }
        } else {
            start = Some(ts);
        }
        previous = Some(ts);
        let r = ExogenousRecord {
            ambient_temperature: fields[1],
            solar_radiation: fields[2],
            wind_speed: fields[3],
        };
        r.validate(exogenous.len()).map_err(|e| TimeSeriesError::Parse {
            line,
            message: e.to_string(),
        })?;
        demand.push(fields[0]);
        exogenous.push(r);
    }
    let start = start.ok_or(TimeSeriesError::Empty)?;
    Dataset::new(TimeSeries::new("heat_demand_mw", start, demand)?, exogenous)
}

/// Splits into `[start, boundary)` and `[boundary, end]`.
pub fn split_train_test(dataset: &Dataset, boundary: NaiveDateTime) -> Result<(Dataset, Dataset)> {
    let start = dataset.demand.start();
    if boundary <= start || boundary >= dataset.demand.end_exclusive() {
        return Err(TimeSeriesError::OutOfRange(boundary));
    }
    let offset = boundary - start;
    if offset.num_seconds() % 3600 != 0 {
        return Err(TimeSeriesError::UnalignedTimestamp(boundary));
    }
    let cut = offset.num_hours() as usize;
    let values = dataset.demand.values();
    let name = dataset.demand.name();
    let train = Dataset {
        demand: TimeSeries::new(name, start, values[..cut].to_vec())?,
        exogenous: dataset.exogenous[..cut].to_vec(),
    };
    let test = Dataset {
        demand: TimeSeries::new(name, boundary, values[cut..].to_vec())?,
        exogenous: dataset.exogenous[cut..].to_vec(),
    };
    Ok((train, test))
}

/// Z-score statistics of one training channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(TimeSeriesError::DegenerateSeries(format!(
                "normalizer needs finite mean and positive std, got mean={mean}, std={std}"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&x| self.normalize_value(x)).collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&z| self.denormalize_value(z)).collect()
    }
}

/// Mean and population standard deviation of `values`.
pub fn fit_normalizer(values: &[f64]) -> Result<Normalizer> {
    if values.len() < 2 {
        return Err(TimeSeriesError::DegenerateSeries(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    check_finite(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if values.iter().all(|&v| v == values[0]) || !(std > 0.0) {
        return Err(TimeSeriesError::DegenerateSeries("all values are equal".into()));
    }
    Normalizer::new(mean, std)
}

pub fn normalize(normalizer: &Normalizer, values: &[f64]) -> Vec<f64> {
    normalizer.normalize(values)
}

pub fn denormalize(normalizer: &Normalizer, values: &[f64]) -> Vec<f64> {
    normalizer.denormalize(values)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalWave {
    pub period: usize,
    pub amplitude: f64,
    /// radians
    pub phase: f64,
}

/// `level + slope·t + slow_amplitude·sin(2πt/slow_period)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendShape {
    pub level: f64,
    /// MW per hour
    pub slope: f64,
    pub slow_amplitude: f64,
    /// hours
    pub slow_period: f64,
}

/// Synthetic weather and its effect on demand.
///
/// Temperature follows a daily cosine (coldest around 04:00) plus an AR(1)
/// weather anomaly. Demand moves by `demand_per_degree` (negative) for each
/// degree away from `temperature_mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherShape {
    pub temperature_mean: f64,
    pub temperature_daily_amplitude: f64,
    pub anomaly_std: f64,
    pub anomaly_persistence: f64,
    pub demand_per_degree: f64,
    pub solar_peak: f64,
    pub wind_mean: f64,
}

impl Default for WeatherShape {
    fn default() -> Self {
        Self {
            temperature_mean: 2.0,
            temperature_daily_amplitude: 4.0,
            anomaly_std: 0.3,
            anomaly_persistence: 0.98,
            demand_per_degree: -3.0,
            solar_peak: 400.0,
            wind_mean: 4.0,
        }
    }
}

impl WeatherShape {
    /// No weather influence on demand; weather channels are still generated.
    pub fn inert() -> Self {
        Self {
            demand_per_degree: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub start: NaiveDateTime,
    pub hours: usize,
    pub seasonal: Vec<SeasonalWave>,
    pub trend: TrendShape,
    pub weather: WeatherShape,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Waves for the given periods with fixed, distinct amplitudes and phases.
    pub fn default_waves(periods: &[usize]) -> Vec<SeasonalWave> {
        periods
            .iter()
            .map(|&period| {
                let (amplitude, phase) = match period {
                    3 => (3.0, 0.3),
                    4 => (4.0, 1.1),
                    12 => (6.0, 2.0),
                    24 => (15.0, 0.7),
                    _ => (5.0, 0.0),
                };
                SeasonalWave {
                    period,
                    amplitude,
                    phase,
                }
            })
            .collect()
    }

    /// Heat-demand-like defaults over the given periods.
    pub fn with_periods(periods: &[usize], hours: usize, seed: u64) -> Self {
        Self {
            start: default_start(),
            hours,
            seasonal: Self::default_waves(periods),
            trend: TrendShape {
                level: 150.0,
                slope: 0.001,
                slow_amplitude: 5.0,
                slow_period: 8760.0,
            },
            weather: WeatherShape::default(),
            noise_std: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for w in &self.seasonal {
            if !SUPPORTED_PERIODS.contains(&w.period) {
                return Err(TimeSeriesError::Config(format!(
                    "period {} is not one of {:?}",
                    w.period, SUPPORTED_PERIODS
                )));
            }
            if seen.contains(&w.period) {
                return Err(TimeSeriesError::Config(format!("period {} listed twice", w.period)));
            }
            if !w.amplitude.is_finite() || !w.phase.is_finite() {
                return Err(TimeSeriesError::Config("non-finite wave parameter".into()));
            }
            seen.push(w.period);
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(TimeSeriesError::Config(format!("noise std {} must be >= 0", self.noise_std)));
        }
        let max_period = seen.iter().copied().max().unwrap_or(1);
        if self.hours < 10 * max_period || self.hours < 2 {
            return Err(TimeSeriesError::Config(format!(
                "length {} is shorter than 10 x max period ({})",
                self.hours,
                10 * max_period
            )));
        }
        if self.start.minute() != 0 || self.start.second() != 0 {
            return Err(TimeSeriesError::Config("start must be on the hour".into()));
        }
        let w = &self.weather;
        if !(w.anomaly_std >= 0.0) || !(0.0..1.0).contains(&w.anomaly_persistence.abs()) {
            return Err(TimeSeriesError::Config("weather anomaly must have std >= 0 and |persistence| < 1".into()));
        }
        if !(w.solar_peak >= 0.0) || !(w.wind_mean >= 0.0) {
            return Err(TimeSeriesError::Config("solar peak and wind mean must be >= 0".into()));
        }
        if self.trend.slow_amplitude != 0.0 && !(self.trend.slow_period > 0.0) {
            return Err(TimeSeriesError::Config("slow trend period must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_start() -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2008, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid literal date")
}

/// Synthetic dataset plus every generating component.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Seasonal waves keyed by period; `trend` holds everything else
    /// (smooth trend + weather effect + noise), so the parts sum to demand.
    pub truth: CascadeDecomposition,
    pub smooth_trend: Vec<f64>,
    pub weather_effect: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Generates a seeded dataset together with its exact components.
pub fn synthesize(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let n = config.hours;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let w = &config.weather;

    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let innovation = w.anomaly_std * (1.0 - w.anomaly_persistence * w.anomaly_persistence).sqrt();
    let mut anomaly = w.anomaly_std * standard.sample(&mut rng);
    let mut wind_state = 0.0f64;

    let mut exogenous = Vec::with_capacity(n);
    let mut weather_effect = Vec::with_capacity(n);
    for t in 0..n {
        let hour = (t % 24) as f64;
        anomaly = w.anomaly_persistence * anomaly + innovation * standard.sample(&mut rng);
        let daily = -w.temperature_daily_amplitude * (2.0 * PI * (hour - 4.0) / 24.0).cos();
        let temperature = w.temperature_mean + daily + anomaly;
        let daylight = (PI * (hour - 6.0) / 12.0).sin().max(0.0);
        let cloud: f64 = rng.random_range(0.6..1.0);
        let solar = w.solar_peak * daylight * cloud;
        wind_state = 0.9 * wind_state + 0.45 * standard.sample(&mut rng);
        let wind = (w.wind_mean + 2.0 * wind_state).abs();
        exogenous.push(ExogenousRecord {
            ambient_temperature: temperature,
            solar_radiation: solar,
            wind_speed: wind,
        });
        weather_effect.push(w.demand_per_degree * (temperature - w.temperature_mean));
    }

    let noise_dist = Normal::new(0.0, config.noise_std.max(0.0)).map_err(|e| TimeSeriesError::Config(e.to_string()))?;
    let noise: Vec<f64> = (0..n)
        .map(|_| if config.noise_std > 0.0 { noise_dist.sample(&mut rng) } else { 0.0 })
        .collect();

    let tr = &config.trend;
    let smooth_trend: Vec<f64> = (0..n)
        .map(|t| {
            let t = t as f64;
            let slow = if tr.slow_amplitude != 0.0 {
                tr.slow_amplitude * (2.0 * PI * t / tr.slow_period).sin()
            } else {
                0.0
            };
            tr.level + tr.slope * t + slow
        })
        .collect();

    let mut seasonals = BTreeMap::new();
    for wave in &config.seasonal {
        let values: Vec<f64> = (0..n)
            .map(|t| wave.amplitude * (2.0 * PI * t as f64 / wave.period as f64 + wave.phase).sin())
            .collect();
        seasonals.insert(wave.period, values);
    }

    // the trend absorbs whatever the waves leave, so the identity is exact
    let remainder_trend: Vec<f64> = (0..n)
        .map(|t| smooth_trend[t] + weather_effect[t] + noise[t])
        .collect();
    let demand: Vec<f64> = (0..n)
        .map(|t| seasonals.values().fold(remainder_trend[t], |acc, s: &Vec<f64>| acc + s[t]))
        .collect();
    let trend: Vec<f64> = (0..n)
        .map(|t| seasonals.values().fold(demand[t], |acc, s: &Vec<f64>| acc - s[t]))
        .collect();

    let start = config.start;
    let demand_series = TimeSeries::new("heat_demand_mw", start, demand)?;
    let mut seasonal_series = BTreeMap::new();
    for (p, v) in seasonals {
        seasonal_series.insert(p, TimeSeries::new(format!("s{p}"), start, v)?);
    }
    let truth = CascadeDecomposition {
        seasonals: seasonal_series,
        trend: TimeSeries::new("trend", start, trend)?,
    };
    Ok(Synthetic {
        dataset: Dataset::new(demand_series, exogenous)?,
        truth,
        smooth_trend,
        weather_effect,
        noise,
    })
}

/// Draws `n` standard-normal values from a seeded generator. Shared by tests
/// and the demo so the same seed means the same noise everywhere.
pub fn gaussian_noise(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| std * dist.sample(&mut rng)).collect()
}
