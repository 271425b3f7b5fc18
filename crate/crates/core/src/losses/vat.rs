use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{rows_cols, LossError};
use crate::gradcore::{concat, log_softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
    /// After power iteration, flip each direction if `−d` raises the
    /// divergence more than `d` does at radius epsilon.
    pub refine_sign: bool,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            xi: 1e-6,
            power_iters: 1,
            refine_sign: true,
        }
    }
}

/// Constant class distribution `q(r)` of a clean batch, from its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    pub classes: usize,
    pub p: Vec<f64>,
    pub log_p: Vec<f64>,
}

impl SoftTarget {
    pub fn from_logits(logits: &Tensor) -> Result<Self, LossError> {
        let (_, k) = rows_cols(logits, "SoftTarget")?;
        let log_p = log_softmax(&logits.detach())?.into_data();
        let p = log_p.iter().map(|v| v.exp()).collect();
        Ok(Self { classes: k, p, log_p })
    }

    pub fn rows(&self) -> usize {
        self.p.len() / self.classes.max(1)
    }

    fn check(&self, logits: &Tensor) -> Result<(), LossError> {
        if logits.shape() != [self.rows(), self.classes] {
            return Err(crate::gradcore::GradError::ShapeMismatch {
                op: "kl_to_target",
                detail: format!("logits {:?} for target [{}, {}]", logits.shape(), self.rows(), self.classes),
            }
            .into());
        }
        Ok(())
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))`, differentiable in
    /// `logits`.
    pub fn kl(&self, logits: &Tensor) -> Result<Tensor, LossError> {
        self.check(logits)?;
        let n = self.rows() as f64;
        let neg_entropy: f64 = self.p.iter().zip(&self.log_p).map(|(p, lp)| p * lp).sum();
        let cross = log_softmax(logits)?.weighted_sum(&self.p)?;
        Ok(cross.mul_scalar(-1.0 / n).add_scalar(neg_entropy / n))
    }

    /// Per-row divergence from plain logit values.
    pub fn kl_rows(&self, logits: &[f64]) -> Vec<f64> {
        let k = self.classes;
        (0..self.rows())
            .map(|r| {
                let row = &logits[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lz = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                (0..k)
                    .map(|j| {
                        let p = self.p[r * k + j];
                        if p > 0.0 {
                            p * (self.log_p[r * k + j] - (row[j] - lz))
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

fn per_sample_normalize(d: &mut [f64], rows: usize) {
    let m = d.len() / rows.max(1);
    for r in 0..rows {
        let row = &mut d[r * m..(r + 1) * m];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
    }
}

/// Virtual adversarial direction of norm `epsilon` per sample.
///
/// `forward` maps inputs to logits and should use constant parameters so
/// that power iteration leaves model gradients untouched. A sample whose
/// divergence gradient is exactly zero keeps its random start direction.
pub fn vat_perturbation<F, R>(
    forward: F,
    x: &Tensor,
    target: &SoftTarget,
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<Tensor, LossError>
where
    F: Fn(&Tensor) -> Result<Tensor, LossError>,
    R: Rng + ?Sized,
{
    if !(cfg.epsilon > 0.0) || cfg.power_iters == 0 {
        return Err(crate::gradcore::GradError::InvalidArgument(format!(
            "VAT needs epsilon > 0 and power_iters ≥ 1, got {} and {}",
            cfg.epsilon, cfg.power_iters
        ))
        .into());
    }
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(LossError::EmptyBatch("vat_perturbation"));
    }
    let m = x.numel() / rows;
    let mut d: Vec<f64> = (0..x.numel()).map(|_| rng.sample(StandardNormal)).collect();
    per_sample_normalize(&mut d, rows);

    for _ in 0..cfg.power_iters {
        let dt = Tensor::param(x.shape(), d.clone())?;
        let logits = forward(&x.add(&dt.mul_scalar(cfg.xi))?)?;
        target.kl(&logits)?.backward()?;
        let Some(g) = dt.grad() else { continue };
        for r in 0..rows {
            let gr = &g[r * m..(r + 1) * m];
            let norm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                for (di, gi) in d[r * m..(r + 1) * m].iter_mut().zip(gr) {
                    *di = gi / norm;
                }
            }
        }
    }

    if cfg.refine_sign {
        let shifted = |sign: f64| -> Result<Vec<f64>, LossError> {
            let r: Vec<f64> = d.iter().map(|v| sign * cfg.epsilon * v).collect();
            let logits = forward(&x.add_const(&r)?)?;
            Ok(target.kl_rows(logits.data()))
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        for r in 0..rows {
            if minus[r] > plus[r] {
                d[r * m..(r + 1) * m].iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    let r: Vec<f64> = d.iter().map(|v| cfg.epsilon * v).collect();
    Ok(Tensor::from_vec(x.shape(), r)?)
}

/// `KL(q(x) ‖ q(x + perturbation))` averaged over the batch, with the
/// clean distribution held constant. Floored at zero against rounding.
pub fn lds<F>(forward: F, x: &Tensor, target: &SoftTarget, perturbation: &Tensor) -> Result<Tensor, LossError>
where
    F: Fn(&Tensor) -> Result<Tensor, LossError>,
{
    if perturbation.shape() != x.shape() {
        return Err(crate::gradcore::GradError::ShapeMismatch {
            op: "lds",
            detail: format!("perturbation {:?} for input {:?}", perturbation.shape(), x.shape()),
        }
        .into());
    }
    let logits = forward(&x.add(&perturbation.detach())?)?;
    Ok(target.kl(&logits)?.clamp_min(0.0))
}

/// Mean LDS over the concatenation of the labeled and unlabeled batches.
/// `forward_const` serves the power iteration, `forward` the final
/// divergence.
pub fn vat_loss<F, G, R>(
    forward: F,
    forward_const: G,
    labeled: Option<&Tensor>,
    unlabeled: Option<&Tensor>,
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<Tensor, LossError>
where
    F: Fn(&Tensor) -> Result<Tensor, LossError>,
    G: Fn(&Tensor) -> Result<Tensor, LossError>,
    R: Rng + ?Sized,
{
    let parts: Vec<Tensor> = [labeled, unlabeled]
        .into_iter()
        .flatten()
        .filter(|t| t.shape().first().copied().unwrap_or(0) > 0)
        .cloned()
        .collect();
    if parts.is_empty() {
        return Err(LossError::EmptyBatch("vat_loss needs at least one sample"));
    }
    let x = if parts.len() == 1 {
        parts[0].clone()
    } else {
        concat(&parts)?
    };
    let target = SoftTarget::from_logits(&forward_const(&x)?)?;
    let r = vat_perturbation(&forward_const, &x, &target, cfg, rng)?;
    lds(&forward, &x, &target, &r)
}
