use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, CheckpointError};
use super::{AdamState, GradError, Tensor};

/// Ordered, named set of f64 arrays. Training rebuilds graph leaves from
/// the store every step and writes updates back in place.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> usize {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param `{name}`");
        assert!(self.index_of(&name).is_none(), "duplicate param `{name}`");
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.data[i]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.data[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.index_of(name).map(move |i| &mut self.data[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.data.iter().map(Vec::len).collect()
    }

    pub fn total_len(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// One graph leaf per entry; constants when `requires_grad` is false.
    pub fn leaves(&self, requires_grad: bool) -> Vec<Tensor> {
        self.shapes
            .iter()
            .zip(&self.data)
            .map(|(s, d)| {
                if requires_grad {
                    Tensor::param(s, d.clone()).expect("store shapes are consistent")
                } else {
                    Tensor::from_vec(s, d.clone()).expect("store shapes are consistent")
                }
            })
            .collect()
    }

    /// Gradients accumulated on `leaves` (as produced by [`Self::leaves`]).
    pub fn grads_of(&self, leaves: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        leaves.iter().map(Tensor::grad).collect()
    }

    /// One Adam update of every entry; `grads` is aligned with the store.
    pub fn apply_adam(&mut self, state: &mut AdamState, grads: &[Option<Vec<f64>>]) -> Result<(), GradError> {
        let names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        let mut data: Vec<&mut Vec<f64>> = self.data.iter_mut().collect();
        state.step(&names, &mut data, grads)
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for ((n, s), d) in self.names.iter().zip(&self.shapes).zip(&self.data) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for &x in s {
                h.update((x as u64).to_le_bytes());
            }
            for v in d {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for ((n, s), d) in self.names.iter().zip(&self.shapes).zip(&self.data) {
            ck.push(format!("{prefix}{n}"), s, d);
        }
    }

    /// Rebuilds a store from every checkpoint tensor whose name starts with
    /// `prefix`, in file order.
    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Self {
        let mut out = Self::new();
        for t in &ck.tensors {
            if let Some(name) = t.name.strip_prefix(prefix) {
                out.push(name, &t.shape, t.data.clone());
            }
        }
        out
    }

    /// Overwrites values from `ck`; every entry must be present with the
    /// same shape.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<(), CheckpointError> {
        for i in 0..self.len() {
            let t = ck.get(&format!("{prefix}{}", self.names[i]))?;
            if t.shape != self.shapes[i] {
                return Err(CheckpointError::Malformed(format!(
                    "`{}`: shape {:?} in file, {:?} expected",
                    t.name, t.shape, self.shapes[i]
                )));
            }
            self.data[i].clone_from(&t.data);
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), GradError> {
        for (n, d) in self.names.iter().zip(&self.data) {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(GradError::InvalidArgument(format!("parameter `{n}` is not finite")));
            }
        }
        Ok(())
    }
}
