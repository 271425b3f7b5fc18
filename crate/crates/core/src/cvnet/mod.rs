//! Complex-valued feature extractor and classifier.
//!
//! A complex feature map with `C` channels is a real `[B, 2C, L]` tensor:
//! real planes in channels `0..C`, imaginary planes in `C..2C`. The network
//! input `[B, 2, n]` is therefore one complex channel (I + jQ).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::checkpoint::{Checkpoint, CheckpointError};
use crate::gradcore::{
    batchnorm1d, complex_kernel, complex_maxpool1d, concat, conv1d, linear, maxpool1d, softmax,
    BatchStats, BnMode, GradError, ParamStore, Tensor,
};
use crate::seed;

pub const POOL_WINDOW: usize = 2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("lazy layer `{0}` is not bound yet; run a forward pass or bind_lazy first")]
    UnboundLayer(&'static str),
    #[error("input length {got} does not match configured length {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One dense layer of width 1024.
    Long,
    /// Dense layers of widths 512 and 128.
    Short,
}

impl Variant {
    pub fn dense_widths(self) -> &'static [usize] {
        match self {
            Variant::Long => &[1024],
            Variant::Short => &[512, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Keep the complex sample of largest magnitude in each window.
    Magnitude,
    /// Independent max over each real plane.
    PerPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub variant: Variant,
    pub num_classes: usize,
    pub input_length: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 6,
            channels: 64,
            kernel: 3,
            variant: Variant::Long,
            num_classes: 6,
            input_length: 512,
            pooling: Pooling::Magnitude,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_blocks == 0 || self.num_blocks >= usize::BITS as usize {
            return bad(format!("num_blocks must be ≥ 1, got {}", self.num_blocks));
        }
        if self.input_length >> self.num_blocks == 0 {
            return bad(format!(
                "input length {} cannot be halved {} times",
                self.input_length, self.num_blocks
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.channels == 0 {
            return bad("channels must be ≥ 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Width of the semantic feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.variant.dense_widths().last().unwrap()
    }

    /// Length of each plane after the convolutional stack.
    pub fn final_length(&self) -> usize {
        (0..self.num_blocks).fold(self.input_length, |l, _| l.div_ceil(POOL_WINDOW))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalization.
    Train,
    /// Running statistics.
    Eval,
}

pub struct ForwardOutput {
    pub features: Tensor,
    /// One entry per block in training mode, empty in eval mode.
    pub bn_stats: Vec<BatchStats>,
}

/// Network parameters `theta_m`, batch-norm running buffers, and the
/// metric parameters `theta_a` (class centers or proxies), kept in a
/// separate store so the two optimizer groups never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub theta_m: ParamStore,
    pub theta_a: ParamStore,
    pub buffers: ParamStore,
    init_seed: u64,
    dense_in: Option<usize>,
}

fn normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `(a+bi) * (w+vi)` over paired planes via one real convolution with the
/// block kernel. `wr`, `wi` are `[C_out, C_in, k]`; the optional bias is a
/// complex `(real, imag)` pair of `[C_out]` vectors.
pub fn complex_conv1d(
    input: &Tensor,
    wr: &Tensor,
    wi: &Tensor,
    bias: Option<(&Tensor, &Tensor)>,
    padding: usize,
) -> Result<Tensor, GradError> {
    let s = input.shape();
    if s.len() != 3 || s[1] != 2 * wr.shape().get(1).copied().unwrap_or(0) {
        return Err(GradError::ShapeMismatch {
            op: "complex_conv1d",
            detail: format!("input {s:?} for kernel {:?}", wr.shape()),
        });
    }
    let kernel = complex_kernel(wr, wi)?;
    let bias = match bias {
        Some((br, bi)) => Some(concat(&[br.clone(), bi.clone()])?),
        None => None,
    };
    conv1d(input, &kernel, bias.as_ref(), 1, padding)
}

impl ModelParams {
    /// Convolution and batch-norm parameters; dense layers stay unbound
    /// until [`Self::bind_lazy`].
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut theta_m = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (c, k) = (config.channels, config.kernel);
        for b in 0..config.num_blocks {
            let cin = if b == 0 { 1 } else { c };
            let mut rng = seed::rng_for(init_seed, "init-conv", &[b as u64]);
            // each plane N(0, 1/(C_in·k)): real-equivalent fan-in variance 2
            let std = (1.0 / (cin * k) as f64).sqrt();
            theta_m.push(format!("block{b}.wr"), &[c, cin, k], normal(&mut rng, c * cin * k, std));
            theta_m.push(format!("block{b}.wi"), &[c, cin, k], normal(&mut rng, c * cin * k, std));
            theta_m.push(format!("block{b}.br"), &[c], vec![0.0; c]);
            theta_m.push(format!("block{b}.bi"), &[c], vec![0.0; c]);
            theta_m.push(format!("block{b}.gamma"), &[2 * c], vec![1.0; 2 * c]);
            theta_m.push(format!("block{b}.beta"), &[2 * c], vec![0.0; 2 * c]);
            buffers.push(format!("block{b}.running_mean"), &[2 * c], vec![0.0; 2 * c]);
            buffers.push(format!("block{b}.running_var"), &[2 * c], vec![1.0; 2 * c]);
        }
        Ok(Self {
            config,
            theta_m,
            theta_a: ParamStore::new(),
            buffers,
            init_seed,
            dense_in: None,
        })
    }

    pub fn is_bound(&self) -> bool {
        self.dense_in.is_some()
    }

    /// Flattened convolutional width feeding the first dense layer, once bound.
    pub fn dense_in(&self) -> Option<usize> {
        self.dense_in
    }

    /// Infers the first dense layer's input width with a dry forward pass
    /// and allocates the dense stack and classifier. Idempotent.
    pub fn bind_lazy(&mut self) -> Result<usize, ModelError> {
        if let Some(d) = self.dense_in {
            return Ok(d);
        }
        let n = self.config.input_length;
        let x = Tensor::zeros(&[1, 2, n]);
        let leaves = self.theta_m.leaves(false);
        let (h, _) = self.conv_stack(&leaves, &x, Mode::Eval)?;
        let din = h.shape()[1] * h.shape()[2];
        let widths = self.config.variant.dense_widths();
        let mut prev = din;
        for (j, &w) in widths.iter().enumerate() {
            let mut rng = seed::rng_for(self.init_seed, "init-dense", &[j as u64]);
            // hidden layers feed a ReLU, the last one is the feature output
            let gain = if j + 1 < widths.len() { 2.0 } else { 1.0 };
            let std = (gain / prev as f64).sqrt();
            self.theta_m.push(format!("dense{j}.w"), &[w, prev], normal(&mut rng, w * prev, std));
            self.theta_m.push(format!("dense{j}.b"), &[w], vec![0.0; w]);
            prev = w;
        }
        let kc = self.config.num_classes;
        let mut rng = seed::rng_for(self.init_seed, "init-classifier", &[]);
        let std = (1.0 / prev as f64).sqrt();
        self.theta_m.push("classifier.w", &[kc, prev], normal(&mut rng, kc * prev, std));
        self.theta_m.push("classifier.b", &[kc], vec![0.0; kc]);
        self.dense_in = Some(din);
        Ok(din)
    }

    fn leaf<'a>(&self, leaves: &'a [Tensor], name: &str) -> Result<&'a Tensor, ModelError> {
        let i = self
            .theta_m
            .index_of(name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter `{name}`")))?;
        leaves.get(i).ok_or_else(|| {
            ModelError::Grad(GradError::InvalidArgument(format!(
                "{} leaves for {} parameters",
                leaves.len(),
                self.theta_m.len()
            )))
        })
    }

    fn conv_stack(&self, leaves: &[Tensor], x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BatchStats>), ModelError> {
        let s = x.shape();
        if s.len() != 3 || s[1] != 2 {
            return Err(GradError::ShapeMismatch {
                op: "extract_features",
                detail: format!("expected [B, 2, n], got {s:?}"),
            }
            .into());
        }
        if s[2] != self.config.input_length {
            return Err(ModelError::InputLength {
                expected: self.config.input_length,
                got: s[2],
            });
        }
        let pad = self.config.kernel / 2;
        let mut h = x.clone();
        let mut stats = Vec::new();
        for b in 0..self.config.num_blocks {
            let p = |n: &str| self.leaf(leaves, &format!("block{b}.{n}"));
            h = complex_conv1d(&h, p("wr")?, p("wi")?, Some((p("br")?, p("bi")?)), pad)?;
            h = h.relu();
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval {
                    mean: self.buffers.get(&format!("block{b}.running_mean")).unwrap(),
                    var: self.buffers.get(&format!("block{b}.running_var")).unwrap(),
                },
            };
            let (y, st) = batchnorm1d(&h, p("gamma")?, p("beta")?, bn_mode)?;
            stats.extend(st);
            h = match self.config.pooling {
                Pooling::Magnitude => complex_maxpool1d(&y, POOL_WINDOW)?,
                Pooling::PerPlane => maxpool1d(&y, POOL_WINDOW)?,
            };
        }
        Ok((h, stats))
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (b, st) in stats.iter().enumerate() {
            let mi = self.buffers.index_of(&format!("block{b}.running_mean")).unwrap();
            let vi = self.buffers.index_of(&format!("block{b}.running_var")).unwrap();
            let mut mean = std::mem::take(self.buffers.values_mut(mi));
            st.update_running(&mut mean, self.buffers.values_mut(vi), BN_MOMENTUM);
            *self.buffers.values_mut(mi) = mean;
        }
    }

    /// Eval-mode semantic features with constant leaves.
    pub fn eval_features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let leaves = self.theta_m.leaves(false);
        Ok(extract_features(self, &leaves, x, Mode::Eval)?.features)
    }

    /// Eval-mode `(features, logits)`.
    pub fn eval_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let leaves = self.theta_m.leaves(false);
        let z = extract_features(self, &leaves, x, Mode::Eval)?.features;
        let logits = classify(self, &leaves, &z)?;
        Ok((z, logits))
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        self.theta_m.write_to(ck, &format!("{prefix}m."));
        self.theta_a.write_to(ck, &format!("{prefix}a."));
        self.buffers.write_to(ck, &format!("{prefix}buf."));
    }

    /// Restores parameters written by [`Self::write_to`] into a model built
    /// from `config`; the dense stack is bound if the file contains it.
    pub fn read_from(config: ModelConfig, init_seed: u64, ck: &Checkpoint, prefix: &str) -> Result<Self, ModelError> {
        let mut p = Self::new(config, init_seed)?;
        let dense0 = ck.get(&format!("{prefix}m.dense0.w")).ok();
        if let Some(t) = dense0 {
            p.bind_lazy()?;
            if p.dense_in != Some(t.shape[1]) {
                return Err(ModelError::InvalidConfig(format!(
                    "checkpoint dense input width {} does not match model {:?}",
                    t.shape[1], p.dense_in
                )));
            }
        }
        p.theta_m.load_from(ck, &format!("{prefix}m."))?;
        p.buffers.load_from(ck, &format!("{prefix}buf."))?;
        p.theta_a = ParamStore::read_from(ck, &format!("{prefix}a."));
        Ok(p)
    }
}

/// Semantic features `z = g(x)` for `x: [B, 2, n]`. `leaves` are aligned
/// with `params.theta_m` (see [`ParamStore::leaves`]).
pub fn extract_features(params: &ModelParams, leaves: &[Tensor], x: &Tensor, mode: Mode) -> Result<ForwardOutput, ModelError> {
    if !params.is_bound() {
        return Err(ModelError::UnboundLayer("dense0"));
    }
    let (h, bn_stats) = params.conv_stack(leaves, x, mode)?;
    let b = h.shape()[0];
    let mut z = h.reshape(&[b, h.numel() / b.max(1)])?;
    let widths = params.config.variant.dense_widths();
    for j in 0..widths.len() {
        z = linear(
            &z,
            params.leaf(leaves, &format!("dense{j}.w"))?,
            Some(params.leaf(leaves, &format!("dense{j}.b"))?),
        )?;
        if j + 1 < widths.len() {
            z = z.relu();
        }
    }
    Ok(ForwardOutput { features: z, bn_stats })
}

/// Logits `f(z)`.
pub fn classify(params: &ModelParams, leaves: &[Tensor], features: &Tensor) -> Result<Tensor, ModelError> {
    if params.theta_m.index_of("classifier.w").is_none() {
        return Err(ModelError::UnboundLayer("classifier"));
    }
    Ok(linear(
        features,
        params.leaf(leaves, "classifier.w")?,
        Some(params.leaf(leaves, "classifier.b")?),
    )?)
}

/// Class distribution `softmax(f(g(x)))` in eval mode.
pub fn predict_proba(params: &ModelParams, x: &Tensor) -> Result<Tensor, ModelError> {
    let (_, logits) = params.eval_forward(x)?;
    Ok(softmax(&logits)?)
}
