//! Objective terms: supervised and pseudo-labeled cross-entropy, center and
//! proxy-anchor metric losses, KL/LDS/VAT smoothness, and learned
//! uncertainty weighting of a sum of terms.

mod metric;
mod vat;

pub use metric::{
    center_loss, proxy_anchor_loss, ss_center_loss, ss_proxy_anchor_loss, MetricParams,
};
pub use vat::{lds, vat_loss, vat_perturbation, SoftTarget, VatConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{log_softmax, pick, GradError, Tensor};

pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("row {row} is not a distribution (sums to {sum})")]
    NotDistribution { row: usize, sum: f64 },
    #[error("{terms} loss terms but {weights} weights")]
    TermCount { terms: usize, weights: usize },
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("model forward failed: {0}")]
    Forward(String),
}

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize), LossError> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(GradError::ShapeMismatch {
            op,
            detail: format!("expected a 2-D tensor, got {s:?}"),
        }
        .into()),
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), LossError> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
    let (n, k) = rows_cols(logits, "ce_loss")?;
    if n == 0 {
        return Err(LossError::EmptyBatch("ce_loss needs at least one labeled sample"));
    }
    if labels.len() != n {
        return Err(GradError::ShapeMismatch {
            op: "ce_loss",
            detail: format!("{n} rows, {} labels", labels.len()),
        }
        .into());
    }
    check_labels(labels, k)?;
    let rows: Vec<usize> = (0..n).collect();
    let lp = pick(&log_softmax(logits)?, &rows, labels)?;
    Ok(lp.sum().mul_scalar(-1.0 / n as f64))
}

/// Hard pseudo-labels of an unlabeled batch. Computed from detached values.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub accepted: Vec<bool>,
    pub tau: f64,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    /// `(indices, labels)` of accepted samples in batch order.
    pub fn accepted_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        self.accepted
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| (i, self.labels[i]))
            .unzip()
    }
}

/// `argmax softmax(logits)` per row (lowest index on ties), its probability,
/// and whether it exceeds `tau` strictly.
pub fn compute_pseudo_labels(logits: &Tensor, tau: f64) -> Result<PseudoLabelBatch, LossError> {
    let (n, k) = rows_cols(logits, "compute_pseudo_labels")?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(GradError::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")).into());
    }
    let d = logits.data();
    let mut out = PseudoLabelBatch {
        labels: Vec::with_capacity(n),
        confidence: Vec::with_capacity(n),
        accepted: Vec::with_capacity(n),
        tau,
    };
    for r in 0..n {
        let row = &d[r * k..(r + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let z: f64 = row.iter().map(|v| (v - row[best]).exp()).sum();
        let conf = 1.0 / z;
        out.labels.push(best);
        out.confidence.push(conf);
        out.accepted.push(conf > tau);
    }
    Ok(out)
}

/// Labeled cross-entropy plus cross-entropy of accepted unlabeled samples
/// against their pseudo-labels, the latter divided by the full unlabeled
/// batch size. With nothing accepted the result is the labeled loss itself.
pub fn ss_ce_loss(
    logits_l: &Tensor,
    labels_l: &[usize],
    logits_ul: &Tensor,
    pseudo: &PseudoLabelBatch,
) -> Result<Tensor, LossError> {
    let ce = ce_loss(logits_l, labels_l)?;
    let (u, k) = rows_cols(logits_ul, "ss_ce_loss")?;
    if pseudo.len() != u {
        return Err(GradError::ShapeMismatch {
            op: "ss_ce_loss",
            detail: format!("{u} unlabeled rows, {} pseudo-labels", pseudo.len()),
        }
        .into());
    }
    let (idx, labels) = pseudo.accepted_pairs();
    if idx.is_empty() {
        return Ok(ce);
    }
    check_labels(&labels, k)?;
    let lp = pick(&log_softmax(logits_ul)?, &idx, &labels)?;
    Ok(ce.add(&lp.sum().mul_scalar(-1.0 / u as f64))?)
}

/// Mean over rows of `KL(p ‖ q)` with `0·ln(0/q) = 0` and `q` floored at
/// 1e-12. `p` is a constant target; gradients flow into `q`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor, LossError> {
    let (n, k) = rows_cols(p, "kl_divergence")?;
    if q.shape() != p.shape() {
        return Err(GradError::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        }
        .into());
    }
    if n == 0 {
        return Err(LossError::EmptyBatch("kl_divergence"));
    }
    for t in [p, q] {
        for r in 0..n {
            let row = &t.data()[r * k..(r + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0 || v.is_nan()) {
                return Err(LossError::NotDistribution { row: r, sum });
            }
        }
    }
    let pd = p.data();
    let neg_entropy: f64 = pd.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let cross = q.clamp_min(1e-12).ln().weighted_sum(pd)?;
    Ok(cross.mul_scalar(-1.0 / n as f64).add_scalar(neg_entropy / n as f64))
}

/// Learned uncertainty weights, stored as `rho = ln σ` so that σ stays
/// positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub names: Vec<String>,
    pub rho: Vec<f64>,
}

impl LossWeights {
    /// All σ = 1.
    pub fn unit(names: &[&str]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            rho: vec![0.0; names.len()],
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.exp()).collect()
    }
}

/// `Σ_i L_i / (2σ_i²) + ln(1 + σ_i²)` with `σ_i = exp(rho_i)`; each `rho`
/// is a scalar tensor.
pub fn auto_weighted_sum(terms: &[Tensor], rho: &[Tensor]) -> Result<Tensor, LossError> {
    if terms.len() != rho.len() {
        return Err(LossError::TermCount {
            terms: terms.len(),
            weights: rho.len(),
        });
    }
    if terms.is_empty() {
        return Err(LossError::EmptyBatch("auto_weighted_sum of zero terms"));
    }
    let mut total: Option<Tensor> = None;
    for (l, r) in terms.iter().zip(rho) {
        let inv = r.mul_scalar(-2.0).exp().mul_scalar(0.5);
        let reg = r.mul_scalar(2.0).exp().ln_1p();
        let term = l.mul(&inv)?.add(&reg)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.unwrap())
}
