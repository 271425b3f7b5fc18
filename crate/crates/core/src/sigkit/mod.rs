//! Synthetic specific-emitter datasets: per-transmitter impairment profiles,
//! waveform synthesis, stratified splitting, min-max scaling and the binary
//! dataset format.

mod dataset;
mod io;
mod profile;
mod synth;

pub use dataset::{batch_tensor, build_dataset, normalize_min_max, Dataset, DatasetConfig};
pub use io::{load_dataset, load_raw_iq, save_dataset, sidecar_path, RawIqManifest, DATASET_MAGIC, DATASET_VERSION};
pub use profile::{make_profile, EmitterProfile};
pub use synth::{
    rrc_taps, shaped_qpsk, synthesize_sample, synthesize_with_channel, Channel, MIN_SAMPLE_LEN,
    RRC_ROLLOFF, RRC_SPAN_SYMBOLS, SAMPLES_PER_SYMBOL,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SigError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("snr_db must be finite or +inf, got {0}")]
    NonFiniteSnr(f64),
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("dataset is constant (min = max = {0}); cannot normalize")]
    ConstantDataset(f64),
    #[error("empty dataset")]
    Empty,
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("dataset truncated: header promises {needed} bytes, file has {found}")]
    Truncated { needed: usize, found: usize },
    #[error("dataset checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// One received record. Samples are stored as f32 so that the on-disk
/// format round-trips exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IQSignal {
    pub samples: Vec<[f32; 2]>,
    pub label: Option<usize>,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
}

impl IQSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// JSON has no infinity; `+inf` is written as the string `"inf"`.
pub mod snr_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("bad snr value `{s}`"))),
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(serde::Serialize, Deserialize)]
        struct W(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&W(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
        }
    }
}
