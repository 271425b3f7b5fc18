use rand::seq::SliceRandom;

use super::{TrainConfig, TrainError};
use crate::gradcore::{GradError, Tensor};
use crate::seed;
use crate::sigkit::{batch_tensor, Dataset};

/// Indices into `dataset.labeled` and `dataset.unlabeled` for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl BatchPair {
    /// `(labeled signals [B_l, 2, n], labels, unlabeled signals [B_ul, 2, n])`.
    pub fn tensors(&self, dataset: &Dataset) -> Result<(Tensor, Vec<usize>, Option<Tensor>), GradError> {
        let xl = batch_tensor(self.labeled.iter().map(|&i| &dataset.labeled[i]))?;
        let yl = self
            .labeled
            .iter()
            .map(|&i| dataset.labeled[i].label.expect("labeled partition carries labels"))
            .collect();
        let xu = if self.unlabeled.is_empty() {
            None
        } else {
            Some(batch_tensor(self.unlabeled.iter().map(|&i| &dataset.unlabeled[i]))?)
        };
        Ok((xl, yl, xu))
    }
}

/// `len` split into `parts` near-equal consecutive sizes, larger first.
fn even_sizes(len: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| len / parts + usize::from(i < len % parts))
        .collect()
}

/// Batches for iteration `t`. Both streams are reshuffled from `(seed, t)`.
/// The number of pairs is `ceil(max(L, U) / batch_size)`; the longer stream
/// is cut into near-equal batches and the shorter one is read cyclically
/// in batches of `min(batch_size, len)`.
pub fn make_epoch_batches(dataset: &Dataset, config: &TrainConfig, t: usize) -> Result<Vec<BatchPair>, TrainError> {
    let l = dataset.labeled.len();
    if l == 0 {
        return Err(TrainError::EmptyLabeled);
    }
    let u = dataset.unlabeled.len();
    let bs = config.batch_size;
    let count = l.max(u).div_ceil(bs);

    let perm = |len: usize, label: &str| {
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(&mut seed::rng_for(config.seed, label, &[t as u64]));
        p
    };
    let stream = |p: Vec<usize>, long: bool| -> Vec<Vec<usize>> {
        let len = p.len();
        if len == 0 {
            return vec![Vec::new(); count];
        }
        if long {
            let mut at = 0;
            even_sizes(len, count)
                .into_iter()
                .map(|s| {
                    let b = p[at..at + s].to_vec();
                    at += s;
                    b
                })
                .collect()
        } else {
            let s = bs.min(len);
            let mut at = 0;
            (0..count)
                .map(|_| {
                    (0..s)
                        .map(|_| {
                            let v = p[at % len];
                            at += 1;
                            v
                        })
                        .collect()
                })
                .collect()
        }
    };
    let lab = stream(perm(l, "batch-labeled"), l >= u);
    let unl = if config.unlabeled_enabled {
        stream(perm(u, "batch-unlabeled"), u > l)
    } else {
        vec![Vec::new(); count]
    };
    Ok(lab
        .into_iter()
        .zip(unl)
        .map(|(labeled, unlabeled)| BatchPair { labeled, unlabeled })
        .collect())
}
