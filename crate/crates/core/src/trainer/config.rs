use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cvnet::ModelConfig;
use crate::losses::{VatConfig, DEFAULT_TAU};
use crate::sigkit::DatasetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Center,
    #[serde(alias = "pa")]
    ProxyAnchor,
    None,
}

impl Metric {
    /// Default auxiliary learning rate for this metric.
    pub fn default_lr_a(self) -> f64 {
        match self {
            Metric::ProxyAnchor => 0.05,
            _ => 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[serde(alias = "alt")]
    Alternating,
    #[serde(alias = "sim")]
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_m: f64,
    /// `None` picks the metric's default.
    pub lr_a: Option<f64>,
    /// Learning rate of the loss-weight parameters; `None` uses `lr_m`.
    pub lr_sigma: Option<f64>,
    pub metric: Metric,
    pub vat_enabled: bool,
    pub unlabeled_enabled: bool,
    pub schedule: Schedule,
    pub tau: f64,
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
    pub vat_refine_sign: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            lr_m: 0.001,
            lr_a: None,
            lr_sigma: None,
            metric: Metric::Center,
            vat_enabled: true,
            unlabeled_enabled: true,
            schedule: Schedule::Alternating,
            tau: DEFAULT_TAU,
            alpha: 32.0,
            delta: 0.1,
            epsilon: 1.0,
            xi: 1e-6,
            power_iters: 1,
            vat_refine_sign: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_a(&self) -> f64 {
        self.lr_a.unwrap_or_else(|| self.metric.default_lr_a())
    }

    pub fn lr_sigma(&self) -> f64 {
        self.lr_sigma.unwrap_or(self.lr_m)
    }

    pub fn vat(&self) -> VatConfig {
        VatConfig {
            epsilon: self.epsilon,
            xi: self.xi,
            power_iters: self.power_iters,
            refine_sign: self.vat_refine_sign,
        }
    }

    pub fn ssml_enabled(&self) -> bool {
        self.metric != Metric::None
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return Err(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        for (name, v) in [("lr_m", self.lr_m), ("lr_a", self.lr_a()), ("lr_sigma", self.lr_sigma()), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.delta >= 0.0) {
            return Err(format!("delta must be ≥ 0, got {}", self.delta));
        }
        if self.vat_enabled && (!(self.epsilon > 0.0) || self.power_iters == 0 || !(self.xi > 0.0)) {
            return Err("VAT needs epsilon > 0, xi > 0 and power_iters ≥ 1".into());
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON of every setting that affects the
/// trajectory of a run. The iteration budget is left out so that a run can
/// be extended from its checkpoint.
pub fn config_hash(dataset: &DatasetConfig, model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig {
        iterations: 0,
        ..train.clone()
    };
    let doc = serde_json::json!({ "dataset": dataset, "model": model, "train": train });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
