use std::fmt;
use std::fs;
use std::path::Path;

use matsei::cvnet::ModelConfig;
use matsei::sigkit::{DatasetConfig, SigError};
use matsei::trainer::{Metric, Schedule, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

/// Stable process exit codes.
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Extra fields for the final JSON line.
    pub detail: Option<serde_json::Value>,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, msg)
    }

    pub fn io(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, msg)
    }

    pub fn other(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_OTHER, msg)
    }

    pub fn new(code: i32, msg: impl fmt::Display) -> Self {
        Self {
            code,
            message: msg.to_string(),
            detail: None,
        }
    }
}

impl From<SigError> for CliError {
    fn from(e: SigError) -> Self {
        match e {
            SigError::InvalidConfig(_) | SigError::NonFiniteSnr(_) | SigError::Stratification(_) => Self::config(e),
            SigError::ConstantDataset(_) | SigError::Empty => Self::other(e),
            _ => Self::io(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::ConfigMismatch { .. } | TrainError::EmptyLabeled => Self::config(e),
            TrainError::Checkpoint(_) | TrainError::Meta(_) => Self::io(e),
            TrainError::NonFinite(_) => Self::new(EXIT_NON_FINITE, e),
            _ => Self::other(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}

/// One JSON document holding every setting of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model input geometry follows the dataset.
    pub fn sync_model(&mut self, num_classes: usize, n: usize) {
        self.model.num_classes = num_classes;
        self.model.input_length = n;
    }
}

/// Short method name used in tables.
pub fn method_name(t: &TrainConfig) -> String {
    if !t.vat_enabled && t.metric == Metric::None && !t.unlabeled_enabled {
        return "CVNN".into();
    }
    let mut name = match t.metric {
        Metric::Center => "MAT-CL".to_string(),
        Metric::ProxyAnchor => "MAT-PA".to_string(),
        Metric::None => "MAT".to_string(),
    };
    if !t.vat_enabled {
        name.push_str(" w/o VAT");
    }
    if t.metric == Metric::None {
        name.push_str(" w/o SSML");
    }
    if !t.unlabeled_enabled {
        name.push_str(" w/o UTD");
    }
    if t.schedule == Schedule::Simultaneous {
        name.push_str(" (sim)");
    }
    name
}

/// Shallow merge of the keys of `patch` into `base`.
pub fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            b.insert(k.clone(), v.clone());
        }
    }
}
