//! Training loop: labeled/unlabeled batching, the alternating VAT/SSML
//! schedule (or the simultaneous objective), two Adam groups, best-model
//! selection on validation accuracy and resumable state checkpoints.

mod batches;
mod config;

pub use batches::{make_epoch_batches, BatchPair};
pub use config::{config_hash, Metric, Schedule, TrainConfig};

use std::collections::BTreeMap;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvnet::{classify, extract_features, ForwardOutput, Mode, ModelConfig, ModelError, ModelParams};
use crate::evalkit::{accuracy, EvalError};
use crate::gradcore::checkpoint::{Checkpoint, CheckpointError};
use crate::gradcore::{concat, slice_rows, AdamConfig, AdamState, GradError, ParamStore, Tensor};
use crate::losses::{
    auto_weighted_sum, ce_loss, compute_pseudo_labels, lds, ss_ce_loss, vat_perturbation, LossError, MetricParams,
    PseudoLabelBatch, SoftTarget,
};
use crate::seed;
use crate::sigkit::{Dataset, DatasetConfig};

/// Uncertainty weights, one per (branch, term role). σ = exp(rho).
pub const WEIGHT_NAMES: [&str; 7] = [
    "vat.ce",
    "vat.lds",
    "ssml.ce",
    "ssml.metric",
    "sim.ce",
    "sim.lds",
    "sim.metric",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Branch {
    /// Cross-entropy regularized by virtual adversarial smoothness.
    Vat,
    /// Cross-entropy regularized by the metric loss; also updates `theta_a`.
    Ssml,
    /// All enabled terms in one objective.
    Sim,
    /// Cross-entropy only.
    Ce,
}

impl Branch {
    /// Branch run at iteration `t` (1-based). Under the alternating
    /// schedule odd iterations smooth and even ones apply the metric; a
    /// disabled regulariser leaves the other one running every iteration.
    pub fn for_iteration(cfg: &TrainConfig, t: usize) -> Branch {
        let (vat, ssml) = (cfg.vat_enabled, cfg.ssml_enabled());
        match (cfg.schedule, vat, ssml) {
            (_, false, false) => Branch::Ce,
            (Schedule::Simultaneous, _, _) => Branch::Sim,
            (Schedule::Alternating, true, true) if t % 2 == 0 => Branch::Ssml,
            (Schedule::Alternating, true, _) => Branch::Vat,
            (Schedule::Alternating, false, true) => Branch::Ssml,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Vat => "vat",
            Branch::Ssml => "ssml",
            Branch::Sim => "sim",
            Branch::Ce => "ce",
        }
    }

    fn uses_vat(self, cfg: &TrainConfig) -> bool {
        matches!(self, Branch::Vat) || (self == Branch::Sim && cfg.vat_enabled)
    }

    fn uses_metric(self, cfg: &TrainConfig) -> bool {
        matches!(self, Branch::Ssml) || (self == Branch::Sim && cfg.ssml_enabled())
    }
}

/// Where and why a run hit a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonFiniteReport {
    pub t: usize,
    pub batch: usize,
    pub branch: Branch,
    pub what: String,
    pub loss_terms: BTreeMap<String, f64>,
    pub sigma: BTreeMap<String, f64>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the labeled partition needs at least one sample")]
    EmptyLabeled,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite {} at iteration {} batch {} ({:?})", .0.what, .0.t, .0.batch, .0.branch)]
    NonFinite(Box<NonFiniteReport>),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub branch: Branch,
    /// Mean over the iteration's batches of each raw term.
    pub loss_terms: BTreeMap<String, f64>,
    /// Mean optimized objective, including the weighting regularisers.
    pub objective: f64,
    /// σ of the weights this branch uses, after the iteration.
    pub sigma: BTreeMap<String, f64>,
    pub val_acc: Option<f64>,
    /// Accepted fraction of the unlabeled samples seen this iteration.
    pub pseudo_coverage: Option<f64>,
    pub theta_a_hash: String,
    pub wall_ms: f64,
}

impl IterationRecord {
    /// The record with its timing zeroed, for run-to-run comparison.
    pub fn untimed(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub initial_theta_a_hash: String,
    pub records: Vec<IterationRecord>,
    pub best_iteration: Option<usize>,
    pub best_val: Option<f64>,
}

impl TrainReport {
    pub fn branches(&self) -> Vec<Branch> {
        self.records.iter().map(|r| r.branch).collect()
    }

    /// Every term name that appeared in any iteration.
    pub fn term_inventory(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.loss_terms.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn untimed(&self) -> Self {
        Self {
            records: self.records.iter().map(IterationRecord::untimed).collect(),
            ..self.clone()
        }
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Metadata stored in a state checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub config_hash: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub initial_theta_a_hash: String,
    pub records: Vec<IterationRecord>,
    pub best_iteration: Option<usize>,
    pub best_val: Option<f64>,
}

impl StateMeta {
    pub fn of(ck: &Checkpoint) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&ck.meta)?)
    }
}

/// Metadata of a parameters-only checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub config_hash: String,
    pub model: ModelConfig,
    pub iteration: Option<usize>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters-only checkpoint of a model.
pub fn params_checkpoint(params: &ModelParams, config_hash: &str, iteration: Option<usize>) -> Checkpoint {
    let meta = ParamsMeta {
        config_hash: config_hash.to_string(),
        model: params.config.clone(),
        iteration,
    };
    let mut ck = Checkpoint {
        meta: serde_json::to_string(&meta).expect("meta serializes"),
        tensors: Vec::new(),
    };
    params.write_to(&mut ck, "");
    ck
}

/// Inverse of [`params_checkpoint`].
pub fn load_params(ck: &Checkpoint) -> Result<(ModelParams, ParamsMeta), TrainError> {
    let meta: ParamsMeta = serde_json::from_str(&ck.meta)?;
    let params = ModelParams::read_from(meta.model.clone(), 0, ck, "")?;
    Ok((params, meta))
}

fn write_adam(ck: &mut Checkpoint, prefix: &str, state: &AdamState, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        ck.push(format!("{prefix}m.{n}"), &[state.m[i].len()], &state.m[i]);
        ck.push(format!("{prefix}v.{n}"), &[state.v[i].len()], &state.v[i]);
    }
    let steps: Vec<f64> = state.steps.iter().map(|&s| s as f64).collect();
    ck.push(format!("{prefix}steps"), &[steps.len()], &steps);
}

fn read_adam(ck: &Checkpoint, prefix: &str, state: &mut AdamState, names: &[String]) -> Result<(), CheckpointError> {
    let fetch = |name: String, len: usize| -> Result<Vec<f64>, CheckpointError> {
        let t = ck.get(&name)?;
        if t.data.len() != len {
            return Err(CheckpointError::Malformed(format!(
                "`{name}` holds {} values, {len} expected",
                t.data.len()
            )));
        }
        Ok(t.data.clone())
    };
    for (i, n) in names.iter().enumerate() {
        state.m[i] = fetch(format!("{prefix}m.{n}"), state.m[i].len())?;
        state.v[i] = fetch(format!("{prefix}v.{n}"), state.v[i].len())?;
    }
    state.steps = fetch(format!("{prefix}steps"), state.steps.len())?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    Ok(())
}

fn forward_err(e: ModelError) -> LossError {
    LossError::Forward(e.to_string())
}

/// Logits of `x` with the labeled rows `0..split` and the remaining rows
/// batch-normalized as two separate batches.
fn split_logits(params: &ModelParams, leaves: &[Tensor], x: &Tensor, split: usize) -> Result<Tensor, LossError> {
    let n = x.shape()[0];
    let half = |h: &Tensor| -> Result<Tensor, LossError> {
        let f = extract_features(params, leaves, h, Mode::Train).map_err(forward_err)?;
        classify(params, leaves, &f.features).map_err(forward_err)
    };
    if split == n {
        return half(x);
    }
    let a = half(&slice_rows(x, 0, split)?)?;
    let b = half(&slice_rows(x, split, n)?)?;
    Ok(concat(&[a, b])?)
}

struct Half {
    forward: ForwardOutput,
    logits: Tensor,
}

struct StepOutcome {
    terms: Vec<(String, f64)>,
    objective: f64,
    accepted: usize,
    unlabeled: usize,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset_config: DatasetConfig,
    hash: String,
    params: ModelParams,
    best: ModelParams,
    best_iteration: Option<usize>,
    best_val: Option<f64>,
    weights: ParamStore,
    adam_m: AdamState,
    adam_a: AdamState,
    adam_w: AdamState,
    initial_theta_a_hash: String,
    records: Vec<IterationRecord>,
}

impl Trainer {
    pub fn new(dataset: &Dataset, model: ModelConfig, train: TrainConfig) -> Result<Self, TrainError> {
        train.validate().map_err(TrainError::Config)?;
        if dataset.num_classes != model.num_classes || dataset.n != model.input_length {
            return Err(TrainError::Config(format!(
                "model expects {} classes of length {}, dataset has {} of length {}",
                model.num_classes, model.input_length, dataset.num_classes, dataset.n
            )));
        }
        if dataset.labeled.is_empty() {
            return Err(TrainError::EmptyLabeled);
        }
        let mut params = ModelParams::new(model.clone(), seed::derive_seed(train.seed, "model", &[]))?;
        params.bind_lazy()?;
        let (k, d) = (model.num_classes, model.feature_dim());
        let name = match train.metric {
            Metric::Center => Some("centers"),
            Metric::ProxyAnchor => Some("proxies"),
            Metric::None => None,
        };
        if let Some(name) = name {
            let mut rng = seed::rng_for(train.seed, name, &[]);
            let v = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            params.theta_a.push(name, &[k, d], v);
        }
        let mut weights = ParamStore::new();
        for n in WEIGHT_NAMES {
            weights.push(n, &[], vec![0.0]);
        }
        let adam_m = AdamState::new(AdamConfig::with_lr(train.lr_m), &params.theta_m.sizes());
        let adam_a = AdamState::new(AdamConfig::with_lr(train.lr_a()), &params.theta_a.sizes());
        let adam_w = AdamState::new(AdamConfig::with_lr(train.lr_sigma()), &weights.sizes());
        Ok(Self {
            hash: config_hash(&dataset.config, &model, &train),
            initial_theta_a_hash: hex(&params.theta_a.digest()),
            best: params.clone(),
            model_config: model,
            dataset_config: dataset.config.clone(),
            train_config: train,
            params,
            best_iteration: None,
            best_val: None,
            weights,
            adam_m,
            adam_a,
            adam_w,
            records: Vec::new(),
        })
    }

    /// Restores a state checkpoint. The configs must hash to the value
    /// stored in it; only the iteration budget may differ.
    pub fn resume(ck: &Checkpoint, dataset: &Dataset, model: ModelConfig, train: TrainConfig) -> Result<Self, TrainError> {
        let meta = StateMeta::of(ck)?;
        let mut tr = Self::new(dataset, model, train)?;
        if meta.config_hash != tr.hash {
            return Err(TrainError::ConfigMismatch {
                expected: tr.hash,
                found: meta.config_hash,
            });
        }
        let init_seed = seed::derive_seed(tr.train_config.seed, "model", &[]);
        tr.params = ModelParams::read_from(tr.model_config.clone(), init_seed, ck, "")?;
        tr.best = ModelParams::read_from(tr.model_config.clone(), init_seed, ck, "best.")?;
        tr.weights.load_from(ck, "w.")?;
        read_adam(ck, "adam.m.", &mut tr.adam_m, tr.params.theta_m.names())?;
        read_adam(ck, "adam.a.", &mut tr.adam_a, tr.params.theta_a.names())?;
        read_adam(ck, "adam.w.", &mut tr.adam_w, tr.weights.names())?;
        tr.initial_theta_a_hash = meta.initial_theta_a_hash;
        tr.records = meta.records;
        tr.best_iteration = meta.best_iteration;
        tr.best_val = meta.best_val;
        Ok(tr)
    }

    /// Full state: current and best parameters, weights, optimizer moments
    /// and the report so far.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = StateMeta {
            config_hash: self.hash.clone(),
            dataset: self.dataset_config.clone(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            initial_theta_a_hash: self.initial_theta_a_hash.clone(),
            records: self.records.clone(),
            best_iteration: self.best_iteration,
            best_val: self.best_val,
        };
        let mut ck = Checkpoint {
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            tensors: Vec::new(),
        };
        self.params.write_to(&mut ck, "");
        self.best.write_to(&mut ck, "best.");
        self.weights.write_to(&mut ck, "w.");
        write_adam(&mut ck, "adam.m.", &self.adam_m, self.params.theta_m.names());
        write_adam(&mut ck, "adam.a.", &self.adam_a, self.params.theta_a.names());
        write_adam(&mut ck, "adam.w.", &self.adam_w, self.weights.names());
        ck
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn best_params(&self) -> &ModelParams {
        &self.best
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    pub fn t_done(&self) -> usize {
        self.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.t_done() >= self.train_config.iterations
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            config_hash: self.hash.clone(),
            initial_theta_a_hash: self.initial_theta_a_hash.clone(),
            records: self.records.clone(),
            best_iteration: self.best_iteration,
            best_val: self.best_val,
        }
    }

    fn sigma_map(&self, names: &[String]) -> BTreeMap<String, f64> {
        names
            .iter()
            .map(|n| (n.clone(), self.weights.get(n).expect("weight exists")[0].exp()))
            .collect()
    }

    fn half(&self, leaves: &[Tensor], x: &Tensor) -> Result<Half, TrainError> {
        let forward = extract_features(&self.params, leaves, x, Mode::Train)?;
        let logits = classify(&self.params, leaves, &forward.features)?;
        Ok(Half { forward, logits })
    }

    fn non_finite(&self, t: usize, batch: usize, branch: Branch, what: String, terms: &[(String, f64)]) -> TrainError {
        let names: Vec<String> = WEIGHT_NAMES
            .iter()
            .filter(|n| n.starts_with(branch.prefix()))
            .map(|n| n.to_string())
            .collect();
        TrainError::NonFinite(Box::new(NonFiniteReport {
            t,
            batch,
            branch,
            what,
            loss_terms: terms.iter().cloned().collect(),
            sigma: self.sigma_map(&names),
        }))
    }

    fn step(&mut self, dataset: &Dataset, pair: &BatchPair, branch: Branch, t: usize, b: usize) -> Result<StepOutcome, TrainError> {
        let cfg = self.train_config.clone();
        let (xl, yl, xu) = pair.tensors(dataset)?;
        let leaves = self.params.theta_m.leaves(true);
        let lab = self.half(&leaves, &xl)?;
        let unl = xu.as_ref().map(|x| self.half(&leaves, x)).transpose()?;
        let pseudo: Option<PseudoLabelBatch> = unl
            .as_ref()
            .map(|u| compute_pseudo_labels(&u.logits, cfg.tau))
            .transpose()?;

        // (weight role, reported name, value)
        let mut terms: Vec<(&str, &str, Tensor)> = Vec::new();
        match (&unl, &pseudo) {
            (Some(u), Some(p)) => terms.push(("ce", "ss_ce", ss_ce_loss(&lab.logits, &yl, &u.logits, p)?)),
            _ => terms.push(("ce", "ce", ce_loss(&lab.logits, &yl)?)),
        }

        if branch.uses_vat(&cfg) {
            let (x, logits) = match (&xu, &unl) {
                (Some(xu), Some(u)) => (concat(&[xl.clone(), xu.clone()])?, concat(&[lab.logits.clone(), u.logits.clone()])?),
                _ => (xl.clone(), lab.logits.clone()),
            };
            let split = yl.len();
            let target = SoftTarget::from_logits(&logits)?;
            let frozen = self.params.theta_m.leaves(false);
            let params = &self.params;
            let mut rng = seed::rng_for(cfg.seed, "vat", &[t as u64, b as u64]);
            let r = vat_perturbation(
                |x: &Tensor| split_logits(params, &frozen, x, split),
                &x,
                &target,
                &cfg.vat(),
                &mut rng,
            )?;
            let l = lds(|x: &Tensor| split_logits(params, &leaves, x, split), &x, &target, &r)?;
            terms.push(("lds", "lds", l));
        }

        let a_leaves = self.params.theta_a.leaves(true);
        if branch.uses_metric(&cfg) {
            let mp = match cfg.metric {
                Metric::Center => MetricParams::Centers(&a_leaves[0]),
                Metric::ProxyAnchor => MetricParams::Proxies {
                    proxies: &a_leaves[0],
                    alpha: cfg.alpha,
                    delta: cfg.delta,
                },
                Metric::None => unreachable!("metric branch without a metric"),
            };
            let short = if cfg.metric == Metric::Center { "center" } else { "pa" };
            let zl = &lab.forward.features;
            match (&unl, &pseudo) {
                (Some(u), Some(p)) => {
                    let name = if short == "center" { "ss_center" } else { "ss_pa" };
                    terms.push(("metric", name, mp.ss_loss(zl, &yl, &u.forward.features, p)?));
                }
                _ => terms.push(("metric", short, mp.loss(zl, &yl)?)),
            }
        }

        let values: Vec<(String, f64)> = terms.iter().map(|(_, n, v)| (n.to_string(), v.item())).collect();
        if let Some((n, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(self.non_finite(t, b, branch, format!("loss term `{n}`"), &values));
        }

        let w_leaves = self.weights.leaves(true);
        let weighted = terms.len() > 1;
        let objective = if weighted {
            let rho: Vec<Tensor> = terms
                .iter()
                .map(|(role, _, _)| {
                    let i = self.weights.index_of(&format!("{}.{role}", branch.prefix())).expect("weight exists");
                    w_leaves[i].clone()
                })
                .collect();
            let ts: Vec<Tensor> = terms.iter().map(|(_, _, v)| v.clone()).collect();
            auto_weighted_sum(&ts, &rho)?
        } else {
            terms[0].2.clone()
        };
        let objective_value = objective.item();
        if !objective_value.is_finite() {
            return Err(self.non_finite(t, b, branch, "objective".into(), &values));
        }
        objective.backward()?;

        let wrap = |this: &Self, e: GradError| match e {
            GradError::NonFiniteGradient(n) => this.non_finite(t, b, branch, format!("gradient of `{n}`"), &values),
            e => e.into(),
        };
        let gm = self.params.theta_m.grads_of(&leaves);
        let ga = self.params.theta_a.grads_of(&a_leaves);
        let gw = self.weights.grads_of(&w_leaves);
        for (name, g) in self.params.theta_m.names().iter().zip(&gm) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(wrap(self, GradError::NonFiniteGradient(name.clone())));
            }
        }
        let mut adam_m = std::mem::replace(&mut self.adam_m, AdamState::new(AdamConfig::default(), &[]));
        let res = self.params.theta_m.apply_adam(&mut adam_m, &gm);
        self.adam_m = adam_m;
        res.map_err(|e| wrap(self, e))?;
        if branch.uses_metric(&cfg) {
            let mut adam_a = std::mem::replace(&mut self.adam_a, AdamState::new(AdamConfig::default(), &[]));
            let res = self.params.theta_a.apply_adam(&mut adam_a, &ga);
            self.adam_a = adam_a;
            res.map_err(|e| wrap(self, e))?;
        }
        if weighted {
            let mut adam_w = std::mem::replace(&mut self.adam_w, AdamState::new(AdamConfig::default(), &[]));
            let res = self.weights.apply_adam(&mut adam_w, &gw);
            self.adam_w = adam_w;
            res.map_err(|e| wrap(self, e))?;
        }

        self.params.update_running(&lab.forward.bn_stats);
        if let Some(u) = &unl {
            self.params.update_running(&u.forward.bn_stats);
        }
        Ok(StepOutcome {
            terms: values,
            objective: objective_value,
            accepted: pseudo.as_ref().map_or(0, PseudoLabelBatch::accepted_count),
            unlabeled: pseudo.as_ref().map_or(0, PseudoLabelBatch::len),
        })
    }

    /// Runs iteration `t_done() + 1` over all of its batches, scores the
    /// validation split and updates the best model (ties go to the later
    /// iteration). Without a validation split the last model is kept.
    pub fn run_iteration(&mut self, dataset: &Dataset) -> Result<&IterationRecord, TrainError> {
        let start = Instant::now();
        let t = self.t_done() + 1;
        let cfg = &self.train_config;
        let branch = Branch::for_iteration(cfg, t);
        let batches = make_epoch_batches(dataset, cfg, t)?;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut objective = 0.0;
        let (mut accepted, mut unlabeled) = (0, 0);
        for (b, pair) in batches.iter().enumerate() {
            let out = self.step(dataset, pair, branch, t, b)?;
            for (n, v) in out.terms {
                *sums.entry(n).or_insert(0.0) += v;
            }
            objective += out.objective;
            accepted += out.accepted;
            unlabeled += out.unlabeled;
        }
        let nb = batches.len() as f64;
        let loss_terms = sums.into_iter().map(|(n, v)| (n, v / nb)).collect();

        let val_acc = if dataset.validation.is_empty() {
            None
        } else {
            Some(accuracy(&self.params, &dataset.validation)?)
        };
        match val_acc {
            Some(v) if self.best_val.is_none_or(|b| v >= b) => {
                self.best = self.params.clone();
                self.best_iteration = Some(t);
                self.best_val = Some(v);
            }
            None => {
                self.best = self.params.clone();
                self.best_iteration = Some(t);
            }
            _ => {}
        }

        let used: Vec<String> = {
            let mut roles = vec!["ce"];
            if branch.uses_vat(&self.train_config) {
                roles.push("lds");
            }
            if branch.uses_metric(&self.train_config) {
                roles.push("metric");
            }
            if roles.len() > 1 {
                roles.iter().map(|r| format!("{}.{r}", branch.prefix())).collect()
            } else {
                Vec::new()
            }
        };
        let record = IterationRecord {
            t,
            branch,
            loss_terms,
            objective: objective / nb,
            sigma: self.sigma_map(&used),
            val_acc,
            pseudo_coverage: (unlabeled > 0).then(|| accepted as f64 / unlabeled as f64),
            theta_a_hash: hex(&self.params.theta_a.digest()),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.records.push(record);
        Ok(self.records.last().unwrap())
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self, dataset: &Dataset) -> Result<(), TrainError> {
        while !self.is_done() {
            self.run_iteration(dataset)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            report: self.report(),
            final_params: self.params,
            best_params: self.best,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub report: TrainReport,
}

/// Trains from scratch for `train.iterations` iterations.
pub fn train(dataset: &Dataset, model: ModelConfig, train: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut tr = Trainer::new(dataset, model, train)?;
    tr.run(dataset)?;
    Ok(tr.finish())
}

/// Continues a run from a state checkpoint up to `train.iterations`. A
/// checkpoint already at or past the budget is returned unchanged.
pub fn resume(ck: &Checkpoint, dataset: &Dataset, model: ModelConfig, train: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut tr = Trainer::resume(ck, dataset, model, train)?;
    tr.run(dataset)?;
    Ok(tr.finish())
}
