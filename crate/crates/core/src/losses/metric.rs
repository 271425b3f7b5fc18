use super::{check_labels, rows_cols, LossError, PseudoLabelBatch};
use crate::gradcore::{gather_rows, linear, masked_log1p_sum_exp, row_l2_normalize, GradError, Tensor};

/// Auxiliary metric parameters and their hyperparameters.
#[derive(Debug, Clone, Copy)]
pub enum MetricParams<'a> {
    /// One learnable center per class, `[K, D]`.
    Centers(&'a Tensor),
    /// One learnable proxy per class, `[K, D]`, compared by cosine similarity.
    Proxies { proxies: &'a Tensor, alpha: f64, delta: f64 },
}

impl MetricParams<'_> {
    pub fn loss(&self, features: &Tensor, labels: &[usize]) -> Result<Tensor, LossError> {
        match *self {
            MetricParams::Centers(c) => center_loss(features, labels, c),
            MetricParams::Proxies { proxies, alpha, delta } => {
                proxy_anchor_loss(features, labels, proxies, alpha, delta)
            }
        }
    }

    pub fn ss_loss(
        &self,
        features_l: &Tensor,
        labels_l: &[usize],
        features_ul: &Tensor,
        pseudo: &PseudoLabelBatch,
    ) -> Result<Tensor, LossError> {
        match *self {
            MetricParams::Centers(c) => ss_center_loss(features_l, labels_l, features_ul, pseudo, c),
            MetricParams::Proxies { proxies, alpha, delta } => {
                ss_proxy_anchor_loss(features_l, labels_l, features_ul, pseudo, proxies, alpha, delta)
            }
        }
    }
}

fn check_rows(z: &Tensor, labels: &[usize], op: &'static str) -> Result<usize, LossError> {
    let (n, _) = rows_cols(z, op)?;
    if labels.len() != n {
        return Err(GradError::ShapeMismatch {
            op,
            detail: format!("{n} feature rows, {} labels", labels.len()),
        }
        .into());
    }
    Ok(n)
}

/// `Σ ‖z_i − c_{y_i}‖² / (2·denom)`.
fn center_term(z: &Tensor, labels: &[usize], centers: &Tensor, denom: usize) -> Result<Tensor, LossError> {
    let (k, _) = rows_cols(centers, "center_loss")?;
    check_labels(labels, k)?;
    let c = gather_rows(centers, labels)?;
    Ok(z.sub(&c)?.square().sum().mul_scalar(0.5 / denom as f64))
}

/// `(1/2L) Σ ‖z_i − c_{y_i}‖²`.
pub fn center_loss(features: &Tensor, labels: &[usize], centers: &Tensor) -> Result<Tensor, LossError> {
    let n = check_rows(features, labels, "center_loss")?;
    if n == 0 {
        return Err(LossError::EmptyBatch("center_loss"));
    }
    center_term(features, labels, centers, n)
}

/// Center loss over the labeled batch plus the accepted unlabeled samples
/// against their pseudo-class centers, divided by `2U` for the full
/// unlabeled batch size `U`.
pub fn ss_center_loss(
    features_l: &Tensor,
    labels_l: &[usize],
    features_ul: &Tensor,
    pseudo: &PseudoLabelBatch,
    centers: &Tensor,
) -> Result<Tensor, LossError> {
    let n = check_rows(features_l, labels_l, "ss_center_loss")?;
    let u = check_rows(features_ul, &pseudo.labels, "ss_center_loss")?;
    let labeled = if n > 0 {
        Some(center_term(features_l, labels_l, centers, n)?)
    } else {
        None
    };
    let (idx, pl) = pseudo.accepted_pairs();
    let unlabeled = if idx.is_empty() {
        None
    } else {
        Some(center_term(&gather_rows(features_ul, &idx)?, &pl, centers, u)?)
    };
    combine(labeled, unlabeled)
}

fn combine(a: Option<Tensor>, b: Option<Tensor>) -> Result<Tensor, LossError> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => a.add(&b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => Tensor::scalar(0.0),
    })
}

/// Positive and negative proxy-anchor terms for one set of samples: the
/// positive sum over proxies of classes present in `labels` divided by
/// their count, plus the negative sum divided by the number of proxies.
fn pa_terms(z: &Tensor, labels: &[usize], proxies: &Tensor, alpha: f64, delta: f64) -> Result<Tensor, LossError> {
    let (k, _) = rows_cols(proxies, "proxy_anchor_loss")?;
    check_labels(labels, k)?;
    let n = labels.len();
    let s = linear(&row_l2_normalize(z)?, &row_l2_normalize(proxies)?, None)?;
    let mut pos_mask = vec![false; n * k];
    let mut present = vec![false; k];
    for (i, &y) in labels.iter().enumerate() {
        pos_mask[i * k + y] = true;
        present[y] = true;
    }
    let neg_mask: Vec<bool> = pos_mask.iter().map(|p| !p).collect();
    let n_pos = present.iter().filter(|&&p| p).count();
    let pos = masked_log1p_sum_exp(&s.add_scalar(-delta).mul_scalar(-alpha), &pos_mask)?;
    let neg = masked_log1p_sum_exp(&s.add_scalar(delta).mul_scalar(alpha), &neg_mask)?;
    Ok(pos
        .sum()
        .mul_scalar(1.0 / n_pos as f64)
        .add(&neg.sum().mul_scalar(1.0 / k as f64))?)
}

fn check_pa(alpha: f64, delta: f64) -> Result<(), LossError> {
    if !(alpha > 0.0) || !(delta >= 0.0) {
        return Err(GradError::InvalidArgument(format!(
            "proxy anchor needs alpha > 0 and delta ≥ 0, got {alpha}, {delta}"
        ))
        .into());
    }
    Ok(())
}

/// Proxy-anchor loss with cosine similarity, scale `alpha` and margin `delta`.
pub fn proxy_anchor_loss(
    features: &Tensor,
    labels: &[usize],
    proxies: &Tensor,
    alpha: f64,
    delta: f64,
) -> Result<Tensor, LossError> {
    check_pa(alpha, delta)?;
    let n = check_rows(features, labels, "proxy_anchor_loss")?;
    if n == 0 {
        return Err(LossError::EmptyBatch("proxy_anchor_loss"));
    }
    pa_terms(features, labels, proxies, alpha, delta)
}

/// Proxy-anchor loss over the labeled batch plus the same two terms over
/// the accepted unlabeled samples, grouped by pseudo-label. Unaccepted
/// samples take no part in either unlabeled term.
pub fn ss_proxy_anchor_loss(
    features_l: &Tensor,
    labels_l: &[usize],
    features_ul: &Tensor,
    pseudo: &PseudoLabelBatch,
    proxies: &Tensor,
    alpha: f64,
    delta: f64,
) -> Result<Tensor, LossError> {
    check_pa(alpha, delta)?;
    let n = check_rows(features_l, labels_l, "ss_proxy_anchor_loss")?;
    check_rows(features_ul, &pseudo.labels, "ss_proxy_anchor_loss")?;
    let labeled = if n > 0 {
        Some(pa_terms(features_l, labels_l, proxies, alpha, delta)?)
    } else {
        None
    };
    let (idx, pl) = pseudo.accepted_pairs();
    let unlabeled = if idx.is_empty() {
        None
    } else {
        Some(pa_terms(&gather_rows(features_ul, &idx)?, &pl, proxies, alpha, delta)?)
    };
    combine(labeled, unlabeled)
}
