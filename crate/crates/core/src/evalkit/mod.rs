//! Accuracy, confusion, silhouette over semantic features, pseudo-label
//! diagnostics and embedding export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvnet::{ModelError, ModelParams};
use crate::gradcore::parallel;
use crate::sigkit::{batch_tensor, Dataset, IQSignal};

pub const EVAL_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation set is empty")]
    Empty,
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("{0}")]
    Shape(String),
    #[error("embedding export: {0}")]
    Io(#[from] std::io::Error),
}

/// Eval-mode features and logits of a set of records, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub logits: Vec<f64>,
    pub classes: usize,
}

impl Forward {
    pub fn rows(&self) -> usize {
        self.logits.len() / self.classes.max(1)
    }

    /// Argmax per row, lowest class on ties.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits, self.classes)
    }
}

pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn forward_all(params: &ModelParams, signals: &[IQSignal]) -> Result<Forward, EvalError> {
    if signals.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Forward {
        features: Vec::new(),
        feature_dim: params.config.feature_dim(),
        logits: Vec::new(),
        classes: params.config.num_classes,
    };
    for chunk in signals.chunks(EVAL_CHUNK) {
        let x = batch_tensor(chunk).map_err(ModelError::from)?;
        let (z, logits) = params.eval_forward(&x)?;
        out.features.extend_from_slice(z.data());
        out.logits.extend_from_slice(logits.data());
    }
    Ok(out)
}

fn labels_of(signals: &[IQSignal]) -> Result<Vec<usize>, EvalError> {
    signals
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or(EvalError::Unlabeled(i)))
        .collect()
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `K × K` counts, rows indexed by true class, columns by prediction.
pub fn confusion_of(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(EvalError::Shape(format!("class index outside [0, {classes})")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(params: &ModelParams, test: &[IQSignal]) -> Result<f64, EvalError> {
    let labels = labels_of(test)?;
    accuracy_of(&forward_all(params, test)?.predictions(), &labels)
}

pub fn confusion(params: &ModelParams, test: &[IQSignal]) -> Result<Vec<Vec<usize>>, EvalError> {
    let labels = labels_of(test)?;
    confusion_of(&forward_all(params, test)?.predictions(), &labels, params.config.num_classes)
}

/// Mean silhouette with Euclidean distance over the rows of a row-major
/// `[M, dim]` feature matrix. Singleton clusters score 0.
pub fn silhouette(features: &[f64], dim: usize, labels: &[usize]) -> Result<f64, EvalError> {
    let m = labels.len();
    if dim == 0 || features.len() != m * dim {
        return Err(EvalError::Shape(format!(
            "{} feature values for {m} labels of width {dim}",
            features.len()
        )));
    }
    let ids: BTreeMap<usize, usize> = {
        let mut v: Vec<usize> = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    if ids.len() < 2 {
        return Err(EvalError::SingleCluster);
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let kc = ids.len();
    let mut sizes = vec![0usize; kc];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let scores = parallel::map_indexed(m, |i| {
        let ci = cluster[i];
        if sizes[ci] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; kc];
        let xi = row(i);
        for j in 0..m {
            if j == i {
                continue;
            }
            let d = xi
                .iter()
                .zip(row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sums[cluster[j]] += d;
        }
        let a = sums[ci] / (sizes[ci] - 1) as f64;
        let b = (0..kc)
            .filter(|&c| c != ci)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let den = a.max(b);
        if den > 0.0 {
            (b - a) / den
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / m as f64)
}

/// Writes one TSV row per record: the semantic feature columns then the
/// label (−1 when absent), after a header naming the columns.
pub fn export_embeddings(params: &ModelParams, signals: &[IQSignal], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let fwd = forward_all(params, signals)?;
    let mut w = BufWriter::new(File::create(path)?);
    let d = fwd.feature_dim;
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    writeln!(w, "{}", header.join("\t"))?;
    for (i, s) in signals.iter().enumerate() {
        let row = &fwd.features[i * d..(i + 1) * d];
        for v in row {
            write!(w, "{}\t", *v as f32)?;
        }
        writeln!(w, "{}", s.label.map_or(-1, |l| l as i64))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    pub total: usize,
    pub accepted: usize,
    pub coverage: f64,
    /// Absent when nothing is accepted.
    pub accuracy_on_accepted: Option<f64>,
}

pub fn pseudo_quality_of(logits: &[f64], classes: usize, truth: &[usize], tau: f64) -> PseudoLabelQuality {
    let mut accepted = 0;
    let mut correct = 0;
    for (row, &y) in logits.chunks(classes).zip(truth) {
        let best = argmax_rows(row, classes)[0];
        let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
        if 1.0 / z > tau {
            accepted += 1;
            correct += usize::from(best == y);
        }
    }
    let total = truth.len();
    PseudoLabelQuality {
        total,
        accepted,
        coverage: if total > 0 { accepted as f64 / total as f64 } else { 0.0 },
        accuracy_on_accepted: (accepted > 0).then(|| correct as f64 / accepted as f64),
    }
}

/// Coverage and accuracy of confident pseudo-labels against the withheld
/// ground truth of the unlabeled pool.
pub fn pseudo_label_quality(
    params: &ModelParams,
    unlabeled: &[IQSignal],
    diagnostic_labels: &[usize],
    tau: f64,
) -> Result<PseudoLabelQuality, EvalError> {
    if unlabeled.len() != diagnostic_labels.len() {
        return Err(EvalError::Shape(format!(
            "{} diagnostic labels for {} records",
            diagnostic_labels.len(),
            unlabeled.len()
        )));
    }
    let fwd = forward_all(params, unlabeled)?;
    Ok(pseudo_quality_of(&fwd.logits, fwd.classes, diagnostic_labels, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub silhouette: Option<f64>,
    pub per_class_recall: Vec<f64>,
    pub pseudo_label_coverage: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
}

/// Test-set scores; pseudo-label diagnostics on the unlabeled pool when it
/// is non-empty.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, tau: f64) -> Result<EvalResult, EvalError> {
    let labels = labels_of(&dataset.test)?;
    let fwd = forward_all(params, &dataset.test)?;
    let preds = fwd.predictions();
    let confusion = confusion_of(&preds, &labels, fwd.classes)?;
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n > 0 {
                row[k] as f64 / n as f64
            } else {
                0.0
            }
        })
        .collect();
    let silhouette = match silhouette(&fwd.features, fwd.feature_dim, &labels) {
        Ok(s) => Some(s),
        Err(EvalError::SingleCluster) => None,
        Err(e) => return Err(e),
    };
    let pseudo = if dataset.unlabeled.is_empty() {
        None
    } else {
        Some(pseudo_label_quality(params, &dataset.unlabeled, &dataset.diagnostic_labels, tau)?)
    };
    Ok(EvalResult {
        accuracy: accuracy_of(&preds, &labels)?,
        confusion,
        silhouette,
        per_class_recall,
        pseudo_label_coverage: pseudo.as_ref().map(|p| p.coverage),
        pseudo_label_accuracy: pseudo.and_then(|p| p.accuracy_on_accepted),
    })
}
