//! Binary dataset container plus JSON sidecar, and the raw-iq directory
//! loader for external captures.
//!
//! ```text
//! "MATDS1" | version u16 | K u16 | n u32 | counts u32×4 | norm_min f64 | norm_max f64
//! | per partition (labeled, unlabeled, validation, test):
//! |     count×n×{i f32, q f32} | count×label i32 (−1 when unlabeled)
//! | crc32 u32 over everything before it
//! ```
//!
//! An unset normalization range is written as NaN.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::stratify;
use super::{snr_serde, Dataset, DatasetConfig, IQSignal, SigError};
use crate::seed;

pub const DATASET_MAGIC: &[u8; 6] = b"MATDS1";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 6 + 2 + 2 + 4 + 16 + 16;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: DatasetConfig,
    diagnostic_labels: Vec<usize>,
    #[serde(with = "snr_serde::vec")]
    snr_labeled: Vec<f64>,
    #[serde(with = "snr_serde::vec")]
    snr_unlabeled: Vec<f64>,
    #[serde(with = "snr_serde::vec")]
    snr_validation: Vec<f64>,
    #[serde(with = "snr_serde::vec")]
    snr_test: Vec<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn encode(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.num_classes as u16).to_le_bytes());
    out.extend_from_slice(&(d.n as u32).to_le_bytes());
    for p in d.partitions() {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(&d.norm_min.unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&d.norm_max.unwrap_or(f64::NAN).to_le_bytes());
    for p in d.partitions() {
        for s in p {
            for v in s.samples.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in p {
            let label = s.label.map_or(-1, |l| l as i32);
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Decoded {
    num_classes: usize,
    n: usize,
    parts: [Vec<(Vec<[f32; 2]>, Option<usize>)>; 4],
    norm: (Option<f64>, Option<f64>),
}

fn decode(bytes: &[u8]) -> Result<Decoded, SigError> {
    if bytes.len() < 6 || &bytes[..6] != DATASET_MAGIC {
        return Err(SigError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(SigError::Truncated {
            needed: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u16_at(6);
    if version != DATASET_VERSION {
        return Err(SigError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(SigError::Truncated {
            needed: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    let num_classes = u16_at(8) as usize;
    let n = u32_at(10) as usize;
    let counts: Vec<usize> = (0..4).map(|i| u32_at(14 + 4 * i) as usize).collect();
    let norm = |v: f64| if v.is_nan() { None } else { Some(v) };
    let (lo, hi) = (norm(f64_at(30)), norm(f64_at(38)));

    let per_record = n * 8 + 4;
    let needed = counts
        .iter()
        .try_fold(HEADER_LEN + 4, |acc, &c| c.checked_mul(per_record).and_then(|b| b.checked_add(acc)))
        .unwrap_or(usize::MAX);
    if needed > bytes.len() {
        return Err(SigError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if needed < bytes.len() {
        return Err(SigError::Malformed(format!(
            "{} bytes beyond the declared payload",
            bytes.len() - needed
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SigError::ChecksumMismatch { stored, computed });
    }

    let mut pos = HEADER_LEN;
    let mut parts: [Vec<(Vec<[f32; 2]>, Option<usize>)>; 4] = Default::default();
    for (p, &count) in counts.iter().enumerate() {
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let rec: Vec<[f32; 2]> = bytes[pos..pos + n * 8]
                .chunks_exact(8)
                .map(|c| {
                    [
                        f32::from_le_bytes(c[..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..].try_into().unwrap()),
                    ]
                })
                .collect();
            pos += n * 8;
            samples.push(rec);
        }
        for rec in samples {
            let label = i32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            pos += 4;
            let label = match label {
                -1 => None,
                l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
                l => return Err(SigError::Malformed(format!("label {l} outside [0, {num_classes})"))),
            };
            parts[p].push((rec, label));
        }
    }
    Ok(Decoded {
        num_classes,
        n,
        parts,
        norm: (lo, hi),
    })
}

/// Writes the binary file at `path` and its sidecar next to it.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), SigError> {
    let path = path.as_ref();
    fs::write(path, encode(dataset))?;
    let snr = |p: &[IQSignal]| p.iter().map(|s| s.snr_db).collect::<Vec<_>>();
    let side = Sidecar {
        config: dataset.config.clone(),
        diagnostic_labels: dataset.diagnostic_labels.clone(),
        snr_labeled: snr(&dataset.labeled),
        snr_unlabeled: snr(&dataset.unlabeled),
        snr_validation: snr(&dataset.validation),
        snr_test: snr(&dataset.test),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SigError> {
    let path = path.as_ref();
    let dec = decode(&fs::read(path)?)?;
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let [l, u, v, t] = dec.parts;
    let snrs = [
        side.snr_labeled,
        side.snr_unlabeled,
        side.snr_validation,
        side.snr_test,
    ];
    let mut out: Vec<Vec<IQSignal>> = Vec::with_capacity(4);
    for (part, snr) in [l, u, v, t].into_iter().zip(snrs) {
        if part.len() != snr.len() {
            return Err(SigError::Malformed(format!(
                "sidecar lists {} snr values for a partition of {}",
                snr.len(),
                part.len()
            )));
        }
        out.push(
            part.into_iter()
                .zip(snr)
                .map(|((samples, label), snr_db)| IQSignal {
                    samples,
                    label,
                    snr_db,
                })
                .collect(),
        );
    }
    let test = out.pop().unwrap();
    let validation = out.pop().unwrap();
    let unlabeled = out.pop().unwrap();
    let labeled = out.pop().unwrap();
    if side.diagnostic_labels.len() != unlabeled.len() {
        return Err(SigError::Malformed(format!(
            "{} diagnostic labels for {} unlabeled records",
            side.diagnostic_labels.len(),
            unlabeled.len()
        )));
    }
    Ok(Dataset {
        config: side.config,
        num_classes: dec.num_classes,
        n: dec.n,
        labeled,
        unlabeled,
        validation,
        test,
        diagnostic_labels: side.diagnostic_labels,
        norm_min: dec.norm.0,
        norm_max: dec.norm.1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawIqFile {
    pub label: usize,
    /// Relative to the manifest directory.
    pub path: PathBuf,
}

/// `manifest.json` of a raw-iq directory. Each file holds back-to-back
/// records of `n` interleaved little-endian f32 I/Q pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawIqManifest {
    pub num_classes: usize,
    pub n: usize,
    pub files: Vec<RawIqFile>,
    #[serde(default = "default_ratio")]
    pub labeled_ratio: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_snr", with = "snr_serde")]
    pub snr_db: f64,
}

fn default_ratio() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_validation_fraction() -> f64 {
    0.3
}
fn default_snr() -> f64 {
    f64::INFINITY
}

fn read_records(path: &Path, n: usize) -> Result<Vec<Vec<[f32; 2]>>, SigError> {
    let bytes = fs::read(path)?;
    if bytes.len() % (n * 8) != 0 {
        return Err(SigError::Malformed(format!(
            "{}: {} bytes is not a whole number of {n}-sample records",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(n * 8)
        .map(|rec| {
            rec.chunks_exact(8)
                .map(|c| {
                    [
                        f32::from_le_bytes(c[..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..].try_into().unwrap()),
                    ]
                })
                .collect()
        })
        .collect())
}

/// Loads a raw-iq directory: a per-class test hold-out, then the same
/// stratified split as synthetic data. The result is not normalized.
pub fn load_raw_iq(dir: impl AsRef<Path>) -> Result<Dataset, SigError> {
    let dir = dir.as_ref();
    let m: RawIqManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.n < super::MIN_SAMPLE_LEN || m.num_classes < 2 {
        return Err(SigError::InvalidConfig(format!(
            "raw-iq manifest needs n ≥ {} and ≥ 2 classes",
            super::MIN_SAMPLE_LEN
        )));
    }
    let mut pool: Vec<Vec<IQSignal>> = vec![Vec::new(); m.num_classes];
    for f in &m.files {
        if f.label >= m.num_classes {
            return Err(SigError::InvalidConfig(format!(
                "file {} has label {} outside [0, {})",
                f.path.display(),
                f.label,
                m.num_classes
            )));
        }
        for samples in read_records(&dir.join(&f.path), m.n)? {
            if samples.iter().flatten().any(|v| !v.is_finite()) {
                return Err(SigError::Malformed(format!("{}: non-finite sample", f.path.display())));
            }
            pool[f.label].push(IQSignal {
                samples,
                label: Some(f.label),
                snr_db: m.snr_db,
            });
        }
    }
    let mut test = Vec::new();
    let mut train_pool = Vec::with_capacity(m.num_classes);
    for (k, mut items) in pool.into_iter().enumerate() {
        use rand::seq::SliceRandom;
        items.shuffle(&mut seed::rng_for(m.seed, "raw-test", &[k as u64]));
        let t = (m.test_fraction * items.len() as f64).round() as usize;
        let rest = items.split_off(t.min(items.len()));
        test.extend(items);
        train_pool.push(rest);
    }
    let per_class_count = train_pool.iter().map(Vec::len).min().unwrap_or(0);
    let split = stratify(
        train_pool,
        m.labeled_ratio,
        m.validation_fraction,
        seed::derive_seed(m.seed, "dataset-split", &[]),
    )?;
    let config = DatasetConfig {
        num_classes: m.num_classes,
        n: m.n,
        per_class_count,
        test_per_class: test.len() / m.num_classes,
        labeled_ratio: m.labeled_ratio,
        snr_db: m.snr_db,
        master_seed: m.seed,
        impairment_scale: 0.0,
        validation_fraction: m.validation_fraction,
        channel: Default::default(),
    };
    Ok(Dataset {
        config,
        num_classes: m.num_classes,
        n: m.n,
        labeled: split.labeled,
        unlabeled: split.unlabeled,
        validation: split.validation,
        test,
        diagnostic_labels: split.diagnostic_labels,
        norm_min: None,
        norm_max: None,
    })
}
