use serde::{Deserialize, Serialize};

use super::GradError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a list of parameters. Step counts are kept per
/// parameter so entries without a gradient in some step are skipped
/// instead of decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// One bias-corrected update. `grads[i] == None` leaves parameter `i`
    /// and its moments untouched. Gradients are validated before anything
    /// is modified.
    pub fn step(
        &mut self,
        names: &[&str],
        params: &mut [&mut Vec<f64>],
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), GradError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || names.len() != self.m.len() {
            return Err(GradError::InvalidArgument(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != self.m[i].len() || params[i].len() != g.len() {
                    return Err(GradError::shape("adam_step", format!("parameter `{}`", names[i])));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(GradError::NonFiniteGradient(names[i].to_string()));
                }
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut *params[i]);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
