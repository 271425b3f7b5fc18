//! `mat`: dataset generation, training, ablation grids, reports and
//! evaluation. Every subcommand ends its stdout with one JSON object.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 I/O or
//! format error, 4 non-finite loss.

mod experiment;
mod grid;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matsei::evalkit;
use matsei::gradcore::checkpoint::Checkpoint;
use matsei::losses::DEFAULT_TAU;
use matsei::sigkit::{build_dataset, load_dataset, normalize_min_max, save_dataset};
use matsei::trainer::{load_params, Metric, Schedule};
use serde_json::json;

use experiment::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mat", version, about = "Metric-adversarial semi-supervised emitter identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize, normalize and save a dataset.
    Gen(GenArgs),
    /// Train one model.
    Train(train::TrainArgs),
    /// Run every cell of an experiment grid and aggregate the results.
    Grid(grid::GridArgs),
    /// Loss curves, accuracy-vs-ratio series and a markdown table from run directories.
    Report(report::ReportArgs),
    /// Score a checkpoint on one partition of a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config; only its `dataset` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
    /// Master seed of the dataset.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    partition: Partition,
    /// Pseudo-label threshold for the unlabeled diagnostics.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Write features of the partition as TSV.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Center,
    Pa,
    None,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Center => Metric::Center,
            MetricArg::Pa => Metric::ProxyAnchor,
            MetricArg::None => Metric::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Alt,
    Sim,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Alt => Schedule::Alternating,
            ScheduleArg::Sim => Schedule::Simultaneous,
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<serde_json::Value, CliError> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?.dataset;
    if let Some(r) = args.labeled_ratio {
        cfg.labeled_ratio = r;
    }
    if let Some(s) = args.snr_db {
        cfg.snr_db = s;
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let ds = normalize_min_max(build_dataset(&cfg)?)?;
    save_dataset(&ds, &args.out)?;
    let [l, u, v, t] = ds.partitions().map(<[_]>::len);
    println!("dataset   {}", args.out.display());
    println!("classes   {}  length {}", ds.num_classes, ds.n);
    println!("labeled   {l}  unlabeled {u}  validation {v}  test {t}");
    println!("ratio     {:.4}  snr {} dB", ds.labeled_ratio(), cfg.snr_db);
    Ok(json!({
        "status": "ok",
        "path": args.out,
        "num_classes": ds.num_classes,
        "n": ds.n,
        "labeled": l,
        "unlabeled": u,
        "validation": v,
        "test": t,
        "labeled_ratio": ds.labeled_ratio(),
        "snr_db": if cfg.snr_db.is_finite() { json!(cfg.snr_db) } else { json!("inf") },
    }))
}

fn cmd_eval(args: EvalArgs) -> Result<serde_json::Value, CliError> {
    let ck = Checkpoint::load(&args.checkpoint).map_err(CliError::io)?;
    let (params, meta) = load_params(&ck)?;
    let ds = load_dataset(&args.dataset)?;
    let part = match args.partition {
        Partition::Labeled => &ds.labeled,
        Partition::Unlabeled => &ds.unlabeled,
        Partition::Validation => &ds.validation,
        Partition::Test => &ds.test,
    };
    if let Some(path) = &args.embeddings {
        evalkit::export_embeddings(&params, part, path).map_err(|e| match e {
            evalkit::EvalError::Io(e) => CliError::io(e),
            e => CliError::other(e),
        })?;
    }
    let mut out = json!({ "status": "ok", "config_hash": meta.config_hash, "samples": part.len() });
    if matches!(args.partition, Partition::Test) {
        let r = evalkit::evaluate(&params, &ds, args.tau).map_err(CliError::other)?;
        println!("accuracy   {:.4}", r.accuracy);
        if let Some(s) = r.silhouette {
            println!("silhouette {s:.4}");
        }
        out["result"] = serde_json::to_value(r).expect("result serializes");
    } else if !matches!(args.partition, Partition::Unlabeled) {
        let acc = evalkit::accuracy(&params, part).map_err(CliError::other)?;
        println!("accuracy   {acc:.4}");
        out["accuracy"] = json!(acc);
    } else {
        let q = evalkit::pseudo_label_quality(&params, part, &ds.diagnostic_labels, args.tau)
            .map_err(CliError::other)?;
        println!("coverage   {:.4}", q.coverage);
        out["pseudo_labels"] = serde_json::to_value(q).expect("quality serializes");
    }
    if let Some(p) = args.embeddings {
        out["embeddings"] = json!(p);
    }
    Ok(out)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::config(format!("MAT_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::config("MAT_THREADS must be ≥ 1"));
    }
    if n == 1 {
        matsei::gradcore::parallel::set_enabled(false);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::other)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => train::cmd_train(a),
        Command::Grid(a) => grid::cmd_grid(a),
        Command::Report(a) => report::cmd_report(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(v) => {
            let code = v.get("exit_code").and_then(|c| c.as_i64()).unwrap_or(0) as u8;
            println!("{v}");
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            let mut v = json!({ "status": "error", "code": e.code, "message": e.message });
            if let Some(d) = e.detail {
                experiment::merge(&mut v, &d);
            }
            println!("{v}");
            ExitCode::from(e.code as u8)
        }
    }
}
