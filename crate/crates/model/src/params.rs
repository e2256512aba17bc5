//! Named parameter storage.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use volseg_core::rng::Gaussian;

use crate::tensor::Tensor;
use crate::{ModelError, Result};

/// How a parameter is initialized and whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix / convolution kernel: truncated normal, decayed.
    Weight,
    /// Bias vector: zeros, no decay.
    Bias,
    /// Normalization scale: ones, no decay.
    NormScale,
    /// Normalization shift: zeros, no decay.
    NormShift,
    /// Relative position bias table: truncated normal, no decay.
    Table,
}

impl ParamKind {
    pub fn to_u8(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Table => 4,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Table,
            other => return Err(ModelError::Checkpoint(format!("unknown param kind {other}"))),
        })
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Registration order is fixed by
/// the network builder, so initialization and checkpoints are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.entries.push(Param {
            name: name.to_string(),
            kind,
            value: Tensor::zeros(shape),
        });
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Fill values by kind, drawing in registration order: truncated normal
    /// (stddev 0.02, clipped at two sigma) for weights and tables, zeros for
    /// biases and shifts, ones for scales.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let mut gauss = Gaussian::new();
        for p in &mut self.entries {
            match p.kind {
                ParamKind::Weight | ParamKind::Table => {
                    for v in &mut p.value.data {
                        *v = gauss.sample_truncated(rng, 0.02);
                    }
                }
                ParamKind::Bias | ParamKind::NormShift => {
                    p.value.data.fill(0.0);
                }
                ParamKind::NormScale => {
                    p.value.data.fill(1.0);
                }
            }
        }
    }

    /// All values finite?
    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.grads[idx]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
