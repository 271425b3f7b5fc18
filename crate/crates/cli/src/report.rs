use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use matsei::trainer::IterationRecord;
use serde_json::{json, Value};

use crate::experiment::CliError;
use crate::train::{write_atomic, REPORT_FILE, SUMMARY_FILE};

pub const CURVES_FILE: &str = "loss_curves.csv";
pub const RATIO_FILE: &str = "accuracy_vs_ratio.csv";
pub const MARKDOWN_FILE: &str = "summary.md";

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories, or grid directories whose subdirectories are runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

struct Run {
    label: String,
    records: Vec<IterationRecord>,
    summary: Option<Value>,
}

fn run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(REPORT_FILE).exists() {
            out.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        let mut sub: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|d| d.join(REPORT_FILE).exists())
            .collect();
        if sub.is_empty() {
            return Err(CliError::io(format!("{}: no {REPORT_FILE} found", p.display())));
        }
        sub.sort();
        out.extend(sub);
    }
    Ok(out)
}

fn load_run(dir: &Path) -> Result<Run, CliError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<IterationRecord>(l)
                .map_err(|e| CliError::io(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (i, r) in records.iter().enumerate() {
        if r.t != i + 1 {
            return Err(CliError::io(format!(
                "{}: record {} has iteration {}",
                path.display(),
                i + 1,
                r.t
            )));
        }
    }
    let summary = fs::read_to_string(dir.join(SUMMARY_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let label = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Run { label, records, summary })
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn cmd_report(args: ReportArgs) -> Result<Value, CliError> {
    let runs: Vec<Run> = run_dirs(&args.runs)?
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(&args.out).map_err(CliError::io)?;

    let t_max = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let mut curves = String::from("t");
    for r in &runs {
        curves.push_str(&format!(",{}", r.label));
    }
    curves.push('\n');
    for t in 0..t_max {
        curves.push_str(&(t + 1).to_string());
        for r in &runs {
            curves.push(',');
            curves.push_str(&cell(r.records.get(t).map(|x| x.objective)));
        }
        curves.push('\n');
    }

    let mut ratio_csv = String::from("run,method,labeled_ratio,seed,test_acc,final_test_acc,silhouette\n");
    let mut md_rows: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut ratios: Vec<f64> = Vec::new();
    for r in &runs {
        let Some(s) = &r.summary else { continue };
        let ratio = s["dataset_labeled_ratio"].as_f64().unwrap_or(f64::NAN);
        let method = s["method"].as_str().unwrap_or("?").to_string();
        ratio_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            method,
            ratio,
            s["seed"],
            cell(s["test_acc"].as_f64()),
            cell(s["final_test_acc"].as_f64()),
            cell(s["silhouette"].as_f64()),
        ));
        if !ratios.iter().any(|x| x == &ratio) {
            ratios.push(ratio);
        }
        if let Some(a) = s["test_acc"].as_f64() {
            md_rows.entry(method).or_default().entry(format!("{ratio}")).or_default().push(a);
        }
    }
    ratios.sort_by(f64::total_cmp);

    let mut md = String::from("# Results\n\nMedian test accuracy (%) over seeds.\n\n| Method |");
    for r in &ratios {
        md.push_str(&format!(" {:.0}% labeled |", r * 100.0));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(ratios.len()));
    md.push('\n');
    for (method, cols) in &md_rows {
        md.push_str(&format!("| {method} |"));
        for r in &ratios {
            let v = cols.get(&format!("{r}")).cloned().and_then(median);
            md.push_str(&format!(" {} |", v.map_or("-".into(), |x| format!("{:.2}", x * 100.0))));
        }
        md.push('\n');
    }
    md.push_str("\n| Run | Iterations | First objective | Last objective | Best val |\n|---|---|---|---|---|\n");
    for r in &runs {
        let best = r.summary.as_ref().and_then(|s| s["best_val"].as_f64());
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.label,
            r.records.len(),
            r.records.first().map_or("-".into(), |x| format!("{:.4}", x.objective)),
            r.records.last().map_or("-".into(), |x| format!("{:.4}", x.objective)),
            best.map_or("-".into(), |v| format!("{v:.4}")),
        ));
    }

    let paths = [
        (CURVES_FILE, curves),
        (RATIO_FILE, ratio_csv),
        (MARKDOWN_FILE, md),
    ];
    for (name, body) in &paths {
        write_atomic(&args.out.join(name), body.as_bytes()).map_err(CliError::io)?;
    }
    println!("runs      {}", runs.len());
    println!("written   {}", args.out.display());
    Ok(json!({
        "status": "ok",
        "runs": runs.iter().map(|r| &r.label).collect::<Vec<_>>(),
        "loss_curves": args.out.join(CURVES_FILE),
        "accuracy_vs_ratio": args.out.join(RATIO_FILE),
        "summary": args.out.join(MARKDOWN_FILE),
    }))
}
