use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use matsei::evalkit;
use matsei::gradcore::checkpoint::Checkpoint;
use matsei::sigkit::{build_dataset, load_dataset, normalize_min_max, Dataset};
use matsei::trainer::{params_checkpoint, StateMeta, TrainError, Trainer};
use serde_json::json;

use crate::experiment::{method_name, CliError, ExperimentConfig};
use crate::{MetricArg, ScheduleArg};

pub const REPORT_FILE: &str = "report.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATE_FILE: &str = "state.ck";
pub const DONE_FILE: &str = "DONE";

#[derive(Args, Clone, Default)]
pub struct TrainArgs {
    /// Experiment config (dataset, model and train sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/state.ck`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed iterations, leaving a resumable state.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Write the state checkpoint every this many iterations.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_m: Option<f64>,
    #[arg(long)]
    pub lr_a: Option<f64>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub power_iters: Option<usize>,
    #[arg(long)]
    pub no_vat: bool,
    #[arg(long)]
    pub no_ssml: bool,
    #[arg(long)]
    pub no_unlabeled: bool,
    /// Labeled fraction of a generated dataset.
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { t.$f = v; } )* };
        }
        set!(iterations, batch_size, lr_m, tau, alpha, delta, epsilon, xi, power_iters, seed);
        if self.lr_a.is_some() {
            t.lr_a = self.lr_a;
        }
        if let Some(m) = self.metric {
            t.metric = m.into();
        }
        if let Some(s) = self.schedule {
            t.schedule = s.into();
        }
        if self.no_vat {
            t.vat_enabled = false;
        }
        if self.no_ssml {
            t.metric = matsei::trainer::Metric::None;
        }
        if self.no_unlabeled {
            t.unlabeled_enabled = false;
        }
        if let Some(r) = self.labeled_ratio {
            cfg.dataset.labeled_ratio = r;
        }
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("{}: {e}", path.display()))
}

fn load_data(args: &TrainArgs, cfg: &mut ExperimentConfig) -> Result<Dataset, CliError> {
    let ds = match &args.dataset {
        Some(p) => {
            let ds = load_dataset(p)?;
            if args.labeled_ratio.is_some_and(|r| r != ds.config.labeled_ratio) {
                return Err(CliError::config(
                    "--labeled-ratio conflicts with the dataset file; regenerate it with `mat gen`",
                ));
            }
            ds
        }
        None => normalize_min_max(build_dataset(&cfg.dataset)?)?,
    };
    cfg.dataset = ds.config.clone();
    cfg.sync_model(ds.num_classes, ds.n);
    Ok(ds)
}

fn non_finite_dump(out: &Path, e: TrainError) -> CliError {
    let TrainError::NonFinite(report) = &e else {
        return e.into();
    };
    let path = out.join("diagnostic.json");
    let body = serde_json::to_vec_pretty(report).expect("report serializes");
    let mut err = CliError::from(e);
    match fs::write(&path, body) {
        Ok(()) => {
            eprintln!("diagnostic dump: {}", path.display());
            err.detail = Some(json!({ "diagnostic": path }));
        }
        Err(io) => err.message = format!("{}; writing the diagnostic dump failed: {io}", err.message),
    }
    err
}

pub fn cmd_train(args: TrainArgs) -> Result<serde_json::Value, CliError> {
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let state_path = args.out.join(STATE_FILE);
    let resume_ck = if args.resume && state_path.exists() {
        Some(Checkpoint::load(&state_path).map_err(CliError::io)?)
    } else {
        None
    };

    let mut cfg = match (&resume_ck, &args.config) {
        (Some(ck), None) => {
            let meta = StateMeta::of(ck)?;
            ExperimentConfig {
                dataset: meta.dataset,
                model: meta.model,
                train: meta.train,
            }
        }
        _ => ExperimentConfig::load(args.config.as_deref())?,
    };
    args.apply(&mut cfg);
    let ds = load_data(&args, &mut cfg)?;
    let cfg = cfg;
    if args.checkpoint_every == 0 {
        return Err(CliError::config("--checkpoint-every must be ≥ 1"));
    }

    let mut trainer = match &resume_ck {
        Some(ck) => Trainer::resume(ck, &ds, cfg.model.clone(), cfg.train.clone())?,
        None => Trainer::new(&ds, cfg.model.clone(), cfg.train.clone())?,
    };
    write_atomic(&args.out.join("config.json"), cfg.to_json().as_bytes()).map_err(io_at(&args.out))?;
    let _ = fs::remove_file(args.out.join(DONE_FILE));

    let report_path = args.out.join(REPORT_FILE);
    write_atomic(&report_path, trainer.report().to_ndjson().as_bytes()).map_err(io_at(&report_path))?;
    let mut report = OpenOptions::new()
        .append(true)
        .open(&report_path)
        .map_err(io_at(&report_path))?;

    let stop = args.stop_after.unwrap_or(usize::MAX).min(cfg.train.iterations);
    while trainer.t_done() < stop {
        let rec = trainer
            .run_iteration(&ds)
            .map_err(|e| non_finite_dump(&args.out, e))?
            .clone();
        writeln!(report, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_at(&report_path))?;
        eprintln!(
            "t={:>4} {:<4} objective {:.5} val {}",
            rec.t,
            format!("{:?}", rec.branch).to_uppercase(),
            rec.objective,
            rec.val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if trainer.t_done() % args.checkpoint_every == 0 || trainer.t_done() == stop {
            write_atomic(&state_path, &trainer.checkpoint().encode()).map_err(io_at(&state_path))?;
        }
    }
    let hash = trainer.config_hash().to_string();
    if !trainer.is_done() {
        println!("stopped after iteration {} of {}", trainer.t_done(), cfg.train.iterations);
        return Ok(json!({
            "status": "stopped",
            "config_hash": hash,
            "t_done": trainer.t_done(),
            "state": state_path,
        }));
    }

    let out = trainer.finish();
    let best_it = out.report.best_iteration;
    write_atomic(&args.out.join("best.ck"), &params_checkpoint(&out.best_params, &hash, best_it).encode())
        .map_err(io_at(&args.out))?;
    let final_ck = params_checkpoint(&out.final_params, &hash, Some(cfg.train.iterations));
    write_atomic(&args.out.join("final.ck"), &final_ck.encode()).map_err(io_at(&args.out))?;

    let best = evalkit::evaluate(&out.best_params, &ds, cfg.train.tau).map_err(CliError::other)?;
    let final_test = evalkit::accuracy(&out.final_params, &ds.test).map_err(CliError::other)?;
    let final_val = out.report.records.last().and_then(|r| r.val_acc);
    let summary = json!({
        "status": "ok",
        "config_hash": hash,
        "method": method_name(&cfg.train),
        "labeled_ratio": ds.labeled_ratio(),
        "dataset_labeled_ratio": cfg.dataset.labeled_ratio,
        "seed": cfg.train.seed,
        "metric": cfg.train.metric,
        "schedule": cfg.train.schedule,
        "vat_enabled": cfg.train.vat_enabled,
        "unlabeled_enabled": cfg.train.unlabeled_enabled,
        "iterations": cfg.train.iterations,
        "best_iteration": best_it,
        "best_val": out.report.best_val,
        "final_val": final_val,
        "test_acc": best.accuracy,
        "final_test_acc": final_test,
        "silhouette": best.silhouette,
        "pseudo_label_coverage": best.pseudo_label_coverage,
        "pseudo_label_accuracy": best.pseudo_label_accuracy,
        "terms": out.report.term_inventory(),
    });
    let summary_path = args.out.join(SUMMARY_FILE);
    write_atomic(&summary_path, serde_json::to_string_pretty(&summary).unwrap().as_bytes())
        .map_err(io_at(&summary_path))?;
    File::create(args.out.join(DONE_FILE)).map_err(io_at(&args.out))?;

    println!("method          {}", method_name(&cfg.train));
    println!("best iteration  {}", best_it.map_or("-".into(), |t| t.to_string()));
    println!("validation acc  {}", final_val.map_or("-".into(), |v| format!("{v:.4}")));
    println!("test acc (best) {:.4}", best.accuracy);
    println!("test acc (last) {final_test:.4}");
    Ok(summary)
}
