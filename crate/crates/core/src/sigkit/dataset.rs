use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{make_profile, snr_serde, synthesize_with_channel, Channel, IQSignal, SigError};
use crate::gradcore::{parallel, GradError, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub n: usize,
    /// Training records per emitter (labeled + unlabeled + validation).
    pub per_class_count: usize,
    /// Held-out test records per emitter, drawn with fresh payloads.
    pub test_per_class: usize,
    pub labeled_ratio: f64,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub master_seed: u64,
    pub impairment_scale: f64,
    /// Fraction of the labeled subset held out for model selection.
    pub validation_fraction: f64,
    pub channel: Channel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            n: 512,
            per_class_count: 100,
            test_per_class: 100,
            labeled_ratio: 0.10,
            snr_db: 15.0,
            master_seed: 42,
            impairment_scale: 1.0,
            validation_fraction: 0.30,
            channel: Channel::Flat,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SigError> {
        let bad = |m: String| Err(SigError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return bad(format!("labeled_ratio must be in (0, 1], got {}", self.labeled_ratio));
        }
        if self.per_class_count < 4 {
            return bad(format!("per_class_count must be ≥ 4, got {}", self.per_class_count));
        }
        if self.n < super::MIN_SAMPLE_LEN {
            return bad(format!("n must be ≥ {}, got {}", super::MIN_SAMPLE_LEN, self.n));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !(self.impairment_scale >= 0.0 && self.impairment_scale.is_finite()) {
            return bad(format!("impairment_scale must be ≥ 0, got {}", self.impairment_scale));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(SigError::NonFiniteSnr(self.snr_db));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub num_classes: usize,
    pub n: usize,
    pub labeled: Vec<IQSignal>,
    /// Carry `label: None`; the truth lives in `diagnostic_labels`.
    pub unlabeled: Vec<IQSignal>,
    pub validation: Vec<IQSignal>,
    pub test: Vec<IQSignal>,
    /// True emitter of each unlabeled record, for pseudo-label diagnostics only.
    pub diagnostic_labels: Vec<usize>,
    pub norm_min: Option<f64>,
    pub norm_max: Option<f64>,
}

impl Dataset {
    /// `labeled.len() / (labeled + validation + unlabeled)`, the fraction of
    /// the training pool carrying labels before the validation hold-out.
    pub fn labeled_ratio(&self) -> f64 {
        let l = self.labeled.len() + self.validation.len();
        l as f64 / (l + self.unlabeled.len()) as f64
    }

    pub fn partitions(&self) -> [&[IQSignal]; 4] {
        [&self.labeled, &self.unlabeled, &self.validation, &self.test]
    }
}

pub(crate) struct Split {
    pub labeled: Vec<IQSignal>,
    pub unlabeled: Vec<IQSignal>,
    pub diagnostic_labels: Vec<usize>,
    pub validation: Vec<IQSignal>,
}

/// Largest-remainder allocation of `total` over classes proportional to
/// `sizes`; ties go to classes earlier in `order`.
fn allocate(total: usize, sizes: &[usize], order: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut left = total - alloc.iter().sum::<usize>();
    // remainders scaled by n stay integral
    let mut rank: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .map(|(pos, &k)| (k, pos))
        .collect();
    rank.sort_by(|a, b| {
        let ra = total * sizes[a.0] % n;
        let rb = total * sizes[b.0] % n;
        rb.cmp(&ra).then(a.1.cmp(&b.1))
    });
    for &(k, _) in &rank {
        if left == 0 {
            break;
        }
        if alloc[k] < sizes[k] {
            alloc[k] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Stratified labeled/unlabeled/validation split of a per-class pool.
pub(crate) fn stratify(
    pool: Vec<Vec<IQSignal>>,
    labeled_ratio: f64,
    validation_fraction: f64,
    split_seed: u64,
) -> Result<Split, SigError> {
    let k = pool.len();
    let sizes: Vec<usize> = pool.iter().map(Vec::len).collect();
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return Err(SigError::Empty);
    }
    let total_labeled = ((labeled_ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut seed::rng_for(split_seed, "split-order", &[]));
    let per_class = allocate(total_labeled, &sizes, &order);
    if let Some(c) = per_class.iter().position(|&c| c == 0) {
        return Err(SigError::Stratification(format!(
            "labeled ratio {labeled_ratio} over {n} samples leaves class {c} with no labels"
        )));
    }

    let mut out = Split {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        diagnostic_labels: Vec::new(),
        validation: Vec::new(),
    };
    for (class, mut items) in pool.into_iter().enumerate() {
        items.shuffle(&mut seed::rng_for(split_seed, "split", &[class as u64]));
        let l = per_class[class];
        let v = ((validation_fraction * l as f64).round() as usize).min(l - 1);
        for (i, mut s) in items.into_iter().enumerate() {
            if i < v {
                s.label = Some(class);
                out.validation.push(s);
            } else if i < l {
                s.label = Some(class);
                out.labeled.push(s);
            } else {
                out.diagnostic_labels.push(class);
                s.label = None;
                out.unlabeled.push(s);
            }
        }
    }
    Ok(out)
}

fn generate(config: &DatasetConfig, partition: u64, per_class: usize) -> Result<Vec<Vec<IQSignal>>, SigError> {
    let profiles: Vec<_> = (0..config.num_classes)
        .map(|k| make_profile(k, config.master_seed, config.impairment_scale))
        .collect();
    let flat = parallel::map_indexed(config.num_classes * per_class, |idx| {
        let (k, i) = (idx / per_class, idx % per_class);
        let payload = seed::derive_seed(config.master_seed, "payload", &[partition, k as u64, i as u64]);
        synthesize_with_channel(&profiles[k], payload, config.snr_db, config.n, &config.channel)
    });
    let mut pool: Vec<Vec<IQSignal>> = vec![Vec::with_capacity(per_class); config.num_classes];
    for (idx, s) in flat.into_iter().enumerate() {
        pool[idx / per_class].push(s?);
    }
    Ok(pool)
}

/// Synthesizes the training pool and an independent test pool, then splits
/// the training pool into labeled, unlabeled and validation parts.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset, SigError> {
    config.validate()?;
    let pool = generate(config, 0, config.per_class_count)?;
    let split = stratify(
        pool,
        config.labeled_ratio,
        config.validation_fraction,
        seed::derive_seed(config.master_seed, "dataset-split", &[]),
    )?;
    let test = generate(config, 1, config.test_per_class)?
        .into_iter()
        .flatten()
        .collect();
    Ok(Dataset {
        config: config.clone(),
        num_classes: config.num_classes,
        n: config.n,
        labeled: split.labeled,
        unlabeled: split.unlabeled,
        validation: split.validation,
        test,
        diagnostic_labels: split.diagnostic_labels,
        norm_min: None,
        norm_max: None,
    })
}

/// Affine map of every partition using the joint I/Q extent of the
/// labeled and unlabeled training records.
pub fn normalize_min_max(mut dataset: Dataset) -> Result<Dataset, SigError> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut count = 0usize;
    for s in dataset.labeled.iter().chain(&dataset.unlabeled) {
        for v in s.samples.iter().flatten() {
            if !v.is_finite() {
                return Err(SigError::Malformed(format!("non-finite sample value {v}")));
            }
            lo = lo.min(*v);
            hi = hi.max(*v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(SigError::Empty);
    }
    if lo == hi {
        return Err(SigError::ConstantDataset(lo as f64));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;
    let map = |parts: &mut Vec<IQSignal>| {
        for s in parts.iter_mut() {
            for v in s.samples.iter_mut().flatten() {
                *v = ((*v as f64 - lo) / range) as f32;
            }
        }
    };
    map(&mut dataset.labeled);
    map(&mut dataset.unlabeled);
    map(&mut dataset.validation);
    map(&mut dataset.test);
    dataset.norm_min = Some(lo);
    dataset.norm_max = Some(hi);
    Ok(dataset)
}

/// Stacks records into a `[B, 2, n]` tensor, I in channel 0 and Q in channel 1.
pub fn batch_tensor<'a, I>(signals: I) -> Result<Tensor, GradError>
where
    I: IntoIterator<Item = &'a IQSignal>,
{
    let signals: Vec<&IQSignal> = signals.into_iter().collect();
    let n = signals.first().map_or(0, |s| s.len());
    let mut data = vec![0.0; signals.len() * 2 * n];
    for (b, s) in signals.iter().enumerate() {
        if s.len() != n {
            return Err(GradError::ShapeMismatch {
                op: "batch_tensor",
                detail: format!("record {b} has length {}, expected {n}", s.len()),
            });
        }
        let base = b * 2 * n;
        for (t, v) in s.samples.iter().enumerate() {
            data[base + t] = v[0] as f64;
            data[base + n + t] = v[1] as f64;
        }
    }
    Tensor::from_vec(&[signals.len(), 2, n], data)
}
