//! `sea`: synthesize data, decompose, train, predict and run experiments.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use sea_core::eval::{run_experiment, ExperimentOptions};
use sea_core::pipeline::{PredictionBreakdown, TrainedModel};
use sea_core::stl::cascade_decompose_with;
use sea_core::timeseries::{
    format_timestamp, load_csv, split_train_test, synthesize, Dataset, SynthConfig, TimeSeriesError,
};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "sea", version, about = "Seasonal-decomposition forecasting of hourly heat demand")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its true components.
    Synth(SynthArgs),
    /// Split a dataset into per-period seasonals and a trend.
    Decompose(DecomposeArgs),
    /// Train models and save one bundle per model.
    Train(TrainArgs),
    /// Predict a test period with a saved bundle.
    Predict(PredictArgs),
    /// Train every model repeatedly and compare them.
    Experiment(ExperimentArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
    /// Cascade periods, e.g. `3,4,12,24`.
    #[arg(long)]
    periods: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset length in hours.
    #[arg(long)]
    hours: Option<String>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<String>,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: Option<String>,
    /// First test hour, `YYYY-MM-DDTHH:00`.
    #[arg(long)]
    split: Option<String>,
    /// Test length in hours when no split is given.
    #[arg(long)]
    test_hours: Option<String>,
    /// Comma-separated model ids (A-1, A-2, A-4, B-1, B-2, B-4, ENN).
    #[arg(long)]
    models: Option<String>,
    /// Training epochs per network.
    #[arg(long)]
    epochs: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV; hours before the model's training end are skipped.
    #[arg(long)]
    data: Option<String>,
    /// Model bundle written by `train`.
    #[arg(long)]
    model_dir: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    split: SplitArgs,
    /// Repetitions per model.
    #[arg(long)]
    runs: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<String>,
    /// Report the runs that succeeded instead of stopping at a failure.
    #[arg(long)]
    keep_going: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn log(message: impl AsRef<str>) {
    eprintln!("[sea] {}", message.as_ref());
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path).map_err(Failure::Usage)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v).map_err(Failure::Usage)?;
    }
    let shared = [("out", &common.out), ("seed", &common.seed), ("periods", &common.periods)];
    for (key, value) in shared.iter().chain(flags) {
        if let Some(v) = value {
            cfg.set(key, v).map_err(Failure::Usage)?;
        }
    }
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

fn split_flags(s: &SplitArgs) -> [(&'static str, &Option<String>); 5] {
    [
        ("data", &s.data),
        ("split", &s.split),
        ("test_hours", &s.test_hours),
        ("models", &s.models),
        ("epochs", &s.epochs),
    ]
}

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("effective_config.txt"), &cfg.to_text())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::Usage("no dataset given (use --data or `data = ...`)".into()))?;
    Ok(load_csv(path).with_context(|| format!("loading {}", path.display()))?)
}

fn split(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<(Dataset, Dataset)> {
    let boundary = match cfg.split {
        Some(b) => b,
        None => {
            if data.len() <= cfg.test_hours {
                return Err(anyhow!(
                    "dataset has {} hours, not more than test_hours = {}",
                    data.len(),
                    cfg.test_hours
                ));
            }
            data.demand.timestamp(data.len() - cfg.test_hours)
        }
    };
    Ok(split_train_test(data, boundary)?)
}

/// `timestamp,<name>...` rows from equally long columns.
fn columns_csv(data: &Dataset, names: &[String], columns: &[&[f64]]) -> String {
    let mut out = String::from("timestamp");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&format_timestamp(data.demand.timestamp(i)));
        for c in columns {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

fn predictions_csv(test: &Dataset, p: &PredictionBreakdown) -> String {
    let mut names = vec!["actual".to_string(), "prediction".to_string()];
    names.extend(p.streams.iter().map(|s| s.name().to_string()));
    let mut cols: Vec<&[f64]> = vec![test.demand.values(), p.total.values()];
    cols.extend(p.streams.iter().map(|s| s.values()));
    columns_csv(test, &names, &cols)
}

fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let cfg = resolve(&args.common, &[("hours", &args.hours)])?;
    let synth_cfg = SynthConfig::with_periods(&cfg.pipeline.periods, cfg.hours, cfg.seed);
    let synth = match synthesize(&synth_cfg) {
        Ok(s) => s,
        Err(TimeSeriesError::Config(m)) => return Err(Failure::Usage(m)),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    prepare_out(&cfg)?;
    let data_path = cfg.out.join("dataset.csv");
    synth
        .dataset
        .save_csv(&data_path)
        .with_context(|| format!("writing {}", data_path.display()))?;

    let truth = &synth.truth;
    let mut names: Vec<String> = truth.periods().iter().map(|p| format!("s{p}")).collect();
    names.extend(["trend", "smooth_trend", "weather_effect", "noise"].map(String::from));
    let mut cols: Vec<&[f64]> = truth.seasonals.values().map(|s| s.values()).collect();
    cols.extend([
        truth.trend.values(),
        synth.smooth_trend.as_slice(),
        synth.weather_effect.as_slice(),
        synth.noise.as_slice(),
    ]);
    write(&cfg.out.join("truth.csv"), &columns_csv(&synth.dataset, &names, &cols))?;
    log(format!("wrote {} hours to {}", synth.dataset.len(), cfg.out.display()));
    Ok(())
}

fn cmd_decompose(args: &DecomposeArgs) -> CmdResult {
    let cfg = resolve(&args.common, &[("data", &args.data)])?;
    let data = load(&cfg)?;
    let p = &cfg.pipeline;
    let d = cascade_decompose_with(&data.demand, &p.stl_stages(), p.cascade_order).context("decomposition")?;
    prepare_out(&cfg)?;
    let mut names = vec!["input".to_string()];
    names.extend(d.periods().iter().map(|p| format!("s{p}")));
    names.push("trend".into());
    let mut cols: Vec<&[f64]> = vec![data.demand.values()];
    cols.extend(d.seasonals.values().map(|s| s.values()));
    cols.push(d.trend.values());
    let path = cfg.out.join("components.csv");
    write(&path, &columns_csv(&data, &names, &cols))?;
    log(format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let cfg = resolve(&args.common, &split_flags(&args.split))?;
    let data = load(&cfg)?;
    let (train, _) = split(&cfg, &data)?;
    prepare_out(&cfg)?;
    for spec in &cfg.models {
        log(format!("training {spec} on {} hours", train.len()));
        let model = TrainedModel::train(&train, spec, &cfg.pipeline, cfg.seed, None)
            .with_context(|| format!("training {spec}"))?;
        let dir = cfg.out.join(spec.id());
        model.save(&dir).with_context(|| format!("saving {spec}"))?;
        log(format!("saved {}", dir.display()));
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> CmdResult {
    let cfg = resolve(&args.common, &[("data", &args.data), ("model_dir", &args.model_dir)])?;
    let dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| Failure::Usage("no model bundle given (use --model-dir)".into()))?;
    let model = TrainedModel::load(dir).with_context(|| format!("loading {}", dir.display()))?;
    let data = load(&cfg)?;
    let test = if data.demand.start() < model.train_end() {
        split_train_test(&data, model.train_end()).context("selecting the test period")?.1
    } else {
        data
    };
    let p = model.predict(&test).context("prediction")?;
    prepare_out(&cfg)?;
    let path = cfg.out.join(format!("predictions_{}.csv", model.spec().id()));
    write(&path, &predictions_csv(&test, &p))?;
    let actual = test.demand.values();
    let mape = sea_core::eval::mape(actual, p.total.values()).context("MAPE")?;
    let rmse = sea_core::eval::rmse(actual, p.total.values()).context("RMSE")?;
    println!("{} mape={mape:.4}% rmse={rmse:.4}", model.spec());
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> CmdResult {
    let keep_going = args.keep_going.then(|| "true".to_string());
    let mut flags = split_flags(&args.split).to_vec();
    flags.extend([("runs", &args.runs), ("jobs", &args.jobs), ("keep_going", &keep_going)]);
    let cfg = resolve(&args.common, &flags)?;
    let data = load(&cfg)?;
    let (train, test) = split(&cfg, &data)?;
    prepare_out(&cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .context("starting worker pool")?;
    log(format!(
        "{} models x {} runs, {} training / {} test hours, {} threads",
        cfg.models.len(),
        cfg.runs,
        train.len(),
        test.len(),
        pool.current_num_threads()
    ));
    let options = ExperimentOptions {
        n_runs: cfg.runs,
        master_seed: cfg.seed,
        variance: cfg.variance,
        keep_going: cfg.keep_going,
    };
    let report = pool
        .install(|| run_experiment(&train, &test, &cfg.models, &cfg.pipeline, &options))
        .context("experiment")?;
    write(&cfg.out.join("report.json"), &report.to_json())?;
    write(&cfg.out.join("samples.csv"), &report.samples_csv())?;
    for (id, pred) in &report.predictions {
        let names = ["actual".to_string(), "prediction".to_string()];
        let cols: [&[f64]; 2] = [test.demand.values(), pred];
        write(
            &cfg.out.join(format!("predictions_{id}.csv")),
            &columns_csv(&test, &names, &cols),
        )?;
    }
    for (model, run, message) in &report.failures {
        log(format!("failed: {model} run {run}: {message}"));
    }
    for m in &report.models {
        println!(
            "{:<4} mape {:.4}% (var {:.4})  rmse {:.4} (var {:.4})",
            m.model_id, m.mape.mean, m.mape.variance, m.rmse.mean, m.rmse.variance
        );
    }
    log(format!("report written to {}", cfg.out.display()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
