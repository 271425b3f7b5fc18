use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use matsei::sigkit::{build_dataset, normalize_min_max, save_dataset};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::experiment::{merge, CliError, ExperimentConfig, EXIT_OTHER};
use crate::train::{write_atomic, DONE_FILE, SUMMARY_FILE};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const TABLE_FILE: &str = "table.csv";

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Cells run concurrently as separate processes; overrides the manifest.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ablation {
    pub name: String,
    /// Keys merged into the cell's `train` section.
    #[serde(default)]
    pub train: Value,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Axes {
    pub labeled_ratio: Vec<f64>,
    pub metric: Vec<Value>,
    pub ablation: Vec<Ablation>,
    pub schedule: Vec<Value>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    #[serde(default)]
    pub config: Value,
    /// Relative paths resolve against the manifest's directory.
    pub output_dir: PathBuf,
    /// Shared dataset file; when absent one is generated per labeled ratio.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

struct Cell {
    name: String,
    ratio: Option<f64>,
    ablation: String,
    config: Value,
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        v => v.to_string(),
    }
}

fn expand(m: &ExperimentManifest) -> Vec<Cell> {
    let opt = |v: &Vec<Value>| -> Vec<Option<Value>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    };
    let ratios: Vec<Option<f64>> = if m.axes.labeled_ratio.is_empty() {
        vec![None]
    } else {
        m.axes.labeled_ratio.iter().copied().map(Some).collect()
    };
    let ablations: Vec<Option<&Ablation>> = if m.axes.ablation.is_empty() {
        vec![None]
    } else {
        m.axes.ablation.iter().map(Some).collect()
    };
    let seeds: Vec<Option<u64>> = if m.axes.seeds.is_empty() {
        vec![None]
    } else {
        m.axes.seeds.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for &r in &ratios {
        for metric in opt(&m.axes.metric) {
            for &ab in &ablations {
                for sched in opt(&m.axes.schedule) {
                    for &seed in &seeds {
                        let mut cfg = json!({ "dataset": {}, "model": {}, "train": {} });
                        merge(&mut cfg, &m.config);
                        let mut parts = Vec::new();
                        let mut train = cfg["train"].clone();
                        if train.is_null() {
                            train = json!({});
                        }
                        if let Some(r) = r {
                            let mut d = cfg["dataset"].clone();
                            if d.is_null() {
                                d = json!({});
                            }
                            merge(&mut d, &json!({ "labeled_ratio": r }));
                            cfg["dataset"] = d;
                            parts.push(format!("r{r}"));
                        }
                        if let Some(v) = &metric {
                            merge(&mut train, &json!({ "metric": v }));
                            parts.push(label(v));
                        }
                        if let Some(ab) = ab {
                            merge(&mut train, &ab.train);
                            parts.push(ab.name.clone());
                        }
                        if let Some(v) = &sched {
                            merge(&mut train, &json!({ "schedule": v }));
                            parts.push(label(v));
                        }
                        if let Some(s) = seed {
                            merge(&mut train, &json!({ "seed": s }));
                            parts.push(format!("s{s}"));
                        }
                        cfg["train"] = train;
                        let name = if parts.is_empty() { "run".to_string() } else { parts.join("_") };
                        cells.push(Cell {
                            name: name.replace(['/', ' '], "-"),
                            ratio: r,
                            ablation: ab.map_or(String::new(), |a| a.name.clone()),
                            config: cfg,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn run_cell(exe: &Path, dir: &Path, cell: &Cell, dataset: Option<&Path>) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let cfg_path = dir.join("cell.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cell.config).unwrap()).map_err(|e| e.to_string())?;
    // reject malformed cells without starting a process
    serde_json::from_value::<ExperimentConfig>(cell.config.clone()).map_err(|e| format!("config: {e}"))?;
    let mut cmd = Command::new(exe);
    cmd.arg("train").arg("--config").arg(&cfg_path).arg("--out").arg(dir);
    if let Some(d) = dataset {
        cmd.arg("--dataset").arg(d);
    }
    let log = |n: &str| File::create(dir.join(n)).map(Stdio::from).map_err(|e| e.to_string());
    let status = cmd
        .stdout(log("stdout.log")?)
        .stderr(log("stderr.log")?)
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() && dir.join(DONE_FILE).exists() {
        Ok(())
    } else {
        Err(format!("train exited with {status}"))
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn cmd_grid(args: GridArgs) -> Result<Value, CliError> {
    let text = fs::read_to_string(&args.manifest).map_err(|e| CliError::io(format!("{}: {e}", args.manifest.display())))?;
    let m: ExperimentManifest = serde_json::from_str(&text).map_err(|e| CliError::config(format!("manifest: {e}")))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let out = resolve(&m.output_dir);
    fs::create_dir_all(&out).map_err(CliError::io)?;

    let id_path = out.join("experiment.json");
    if let Ok(existing) = fs::read_to_string(&id_path) {
        let prev: Value = serde_json::from_str(&existing).map_err(|e| CliError::io(format!("{}: {e}", id_path.display())))?;
        if prev["experiment_id"] != json!(m.experiment_id) {
            return Err(CliError::config(format!(
                "{} already holds experiment {}",
                out.display(),
                prev["experiment_id"]
            )));
        }
    }
    write_atomic(&id_path, serde_json::to_string_pretty(&m).unwrap().as_bytes()).map_err(CliError::io)?;

    let cells = expand(&m);
    let mut names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
    names.sort();
    names.dedup();
    if names.len() != cells.len() {
        return Err(CliError::config("grid axes produce duplicate cell names"));
    }

    // one dataset per labeled ratio unless a shared file is given
    let mut datasets: BTreeMap<String, Result<PathBuf, String>> = BTreeMap::new();
    for c in &cells {
        let key = c.ratio.map_or("base".to_string(), |r| format!("r{r}"));
        if datasets.contains_key(&key) {
            continue;
        }
        let entry = match (&m.dataset, c.ratio) {
            (Some(p), None) => Ok(resolve(p)),
            (Some(_), Some(_)) => Err("a shared dataset cannot be combined with a labeled_ratio axis".to_string()),
            (None, _) => {
                let path = out.join("data").join(format!("{key}.bin"));
                if path.exists() {
                    Ok(path)
                } else {
                    serde_json::from_value::<ExperimentConfig>(c.config.clone())
                        .map_err(|e| e.to_string())
                        .and_then(|cfg| {
                            fs::create_dir_all(out.join("data")).map_err(|e| e.to_string())?;
                            let ds = normalize_min_max(build_dataset(&cfg.dataset).map_err(|e| e.to_string())?)
                                .map_err(|e| e.to_string())?;
                            save_dataset(&ds, &path).map_err(|e| e.to_string())?;
                            Ok(path)
                        })
                }
            }
        };
        datasets.insert(key, entry);
    }

    let exe = std::env::current_exe().map_err(CliError::other)?;
    let jobs = args.jobs.unwrap_or(m.jobs).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<String, Result<bool, String>>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = cells.get(i) else { break };
                let dir = out.join(&c.name);
                let res = if dir.join(DONE_FILE).exists() {
                    Ok(false)
                } else {
                    let key = c.ratio.map_or("base".to_string(), |r| format!("r{r}"));
                    match &datasets[&key] {
                        Ok(d) => run_cell(&exe, &dir, c, Some(d)).map(|()| true),
                        Err(e) => Err(format!("dataset: {e}")),
                    }
                };
                eprintln!("{:<40} {}", c.name, match &res {
                    Ok(true) => "done".to_string(),
                    Ok(false) => "skipped (already complete)".to_string(),
                    Err(e) => format!("FAILED: {e}"),
                });
                results.lock().unwrap().insert(c.name.clone(), res);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut agg = String::from(
        "cell,method,ablation,labeled_ratio,metric,schedule,seed,test_acc,final_test_acc,silhouette,best_iteration,status\n",
    );
    let mut table: BTreeMap<String, BTreeMap<String, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    let mut ratios: Vec<String> = Vec::new();
    let mut failed = Vec::new();
    let (mut ran, mut skipped) = (0, 0);
    for c in &cells {
        match &results[&c.name] {
            Err(e) => {
                failed.push(json!({ "cell": c.name, "error": e }));
                agg.push_str(&format!("{},,{},,,,,,,,,failed\n", c.name, c.ablation));
                continue;
            }
            Ok(true) => ran += 1,
            Ok(false) => skipped += 1,
        }
        let path = out.join(&c.name).join(SUMMARY_FILE);
        let s: Value = match fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
            Ok(v) => v,
            Err(e) => {
                failed.push(json!({ "cell": c.name, "error": format!("summary: {e}") }));
                continue;
            }
        };
        let ratio = s["dataset_labeled_ratio"].as_f64().unwrap_or(f64::NAN);
        let method = s["method"].as_str().unwrap_or("?").to_string();
        let row = if c.ablation.is_empty() { method.clone() } else { format!("{method} [{}]", c.ablation) };
        let acc = s["test_acc"].as_f64();
        let sil = s["silhouette"].as_f64();
        agg.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},ok\n",
            c.name,
            method,
            c.ablation,
            ratio,
            label(&s["metric"]),
            label(&s["schedule"]),
            s["seed"],
            fmt_opt(acc),
            fmt_opt(s["final_test_acc"].as_f64()),
            fmt_opt(sil),
            s["best_iteration"],
        ));
        let rk = format!("{ratio}");
        if !ratios.contains(&rk) {
            ratios.push(rk.clone());
        }
        let e = table.entry(row).or_default().entry(rk).or_default();
        e.0.extend(acc);
        e.1.extend(sil);
    }
    ratios.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse::<f64>().unwrap_or(0.0)));
    let mut tab = String::from("method");
    for r in &ratios {
        tab.push_str(&format!(",acc@{r},silhouette@{r}"));
    }
    tab.push('\n');
    for (row, cols) in &mut table {
        tab.push_str(row);
        for r in &ratios {
            let (a, s) = cols.entry(r.clone()).or_default();
            tab.push_str(&format!(",{},{}", fmt_opt(median(a)), fmt_opt(median(s))));
        }
        tab.push('\n');
    }
    write_atomic(&out.join(AGGREGATE_FILE), agg.as_bytes()).map_err(CliError::io)?;
    write_atomic(&out.join(TABLE_FILE), tab.as_bytes()).map_err(CliError::io)?;

    println!("cells     {} ({ran} run, {skipped} skipped, {} failed)", cells.len(), failed.len());
    println!("aggregate {}", out.join(AGGREGATE_FILE).display());
    let mut v = json!({
        "status": if failed.is_empty() { "ok" } else { "partial" },
        "cells": cells.len(),
        "ran": ran,
        "skipped": skipped,
        "failed": failed,
        "aggregate": out.join(AGGREGATE_FILE),
        "table": out.join(TABLE_FILE),
    });
    if !v["failed"].as_array().unwrap().is_empty() {
        v["exit_code"] = json!(EXIT_OTHER);
    }
    Ok(v)
}
