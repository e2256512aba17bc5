//! 3D shifted-window transformer U-Net with hand-rolled reverse-mode
//! autodiff.
//!
//! The network follows the Swin-UNETR layout: patch embedding, four
//! transformer stages alternating window and shifted-window attention with
//! x2 patch merging between stages, and a convolutional decoder with skip
//! connections ending in a 6-channel head. Everything runs in f64 on flat
//! tensors; gradients come from the tape in [`graph`].

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod net;
pub mod params;
pub mod tensor;
pub mod windowing;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use volseg_core::rng::{stream_rng, Domain};

pub use checkpoint::StateMeta;
pub use config::{HeadKind, ModelConfig};
pub use graph::{Graph, NodeId};
pub use net::{PretrainNet, SwinEncoder, SwinUnet};
pub use params::{GradStore, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Whether dropout layers are active during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    On,
}

/// The checkpointable unit: architecture config, parameters, counters.
#[derive(Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub meta: StateMeta,
}

/// Deterministically initialize a model for `(config, seed)`: truncated
/// normal (stddev 0.02) weights, zero biases, unit normalization scales.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    let (_, mut store) = SwinUnet::build(config)?;
    let mut rng = stream_rng(seed, Domain::ModelInit, 0);
    store.init(&mut rng);
    Ok(ModelState { config: config.clone(), params: store, meta: StateMeta::default() })
}

impl ModelState {
    /// Rebuild the network wiring for this state's config.
    pub fn net(&self) -> Result<SwinUnet> {
        Ok(SwinUnet::build(&self.config)?.0)
    }

    /// Run a full forward pass on one volume patch.
    ///
    /// `input` is z-major voxel data of `shape`. Returns channel-first
    /// logits `(6, D, H, W)` flattened z-major. Fails loud on non-finite
    /// activations.
    pub fn forward(
        &self,
        input: &[f32],
        shape: [usize; 3],
        dropout: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let net = self.net()?;
        let s: usize = shape.iter().product();
        if input.len() != s * self.config.in_channels {
            return Err(ModelError::Validation(format!(
                "input length {} does not match shape {shape:?}",
                input.len()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::new(
            vec![s, self.config.in_channels],
            input.iter().map(|&v| v as f64).collect(),
        ));
        let logits = net.forward_graph(&mut g, x, shape, dropout == DropoutMode::On, rng)?;
        let v = g.value(logits);
        if v.data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::Numeric("non-finite activations in forward".into()));
        }
        let plan = windowing::channel_first_plan(s, self.config.num_classes);
        Ok(plan.apply(&v.data))
    }

    /// Per-channel probabilities for channel-first logits, per the head
    /// convention (sigmoid by default, softmax across channels optional).
    pub fn probabilities_channel_first(&self, logits: &[f64], voxels: usize) -> Vec<f64> {
        match self.config.head {
            HeadKind::Sigmoid => logits.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            HeadKind::Softmax => {
                let k = self.config.num_classes;
                let mut out = vec![0.0; logits.len()];
                for v in 0..voxels {
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..k {
                        max = max.max(logits[c * voxels + v]);
                    }
                    let mut sum = 0.0;
                    for c in 0..k {
                        let e = (logits[c * voxels + v] - max).exp();
                        out[c * voxels + v] = e;
                        sum += e;
                    }
                    for c in 0..k {
                        out[c * voxels + v] /= sum;
                    }
                }
                out
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config, &self.meta, &self.params)
    }

    /// Load a segmentation checkpoint, validating the parameter set against
    /// the config.
    pub fn load(path: &Path) -> Result<Self> {
        let (config, meta, store) = checkpoint::load(path)?;
        if meta.pretrain_subvol.is_some() {
            return Err(ModelError::Checkpoint(format!(
                "{}: this is a pretraining checkpoint; pass it to finetune as \
                 the pretrained init instead",
                path.display()
            )));
        }
        let (_, template) = SwinUnet::build(&config)?;
        validate_store_matches(&template, &store)?;
        Ok(Self { config, params: store, meta })
    }

    /// Load and require an exact config match.
    pub fn load_checked(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let state = Self::load(path)?;
        if &state.config != expected {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint config disagrees with the requested config: \
                 checkpoint {:?} vs requested {:?}",
                state.config, expected
            )));
        }
        Ok(state)
    }
}

/// Check that two stores carry identical parameter names and shapes in
/// identical order.
pub fn validate_store_matches(template: &ParamStore, loaded: &ParamStore) -> Result<()> {
    if template.len() != loaded.len() {
        return Err(ModelError::Checkpoint(format!(
            "parameter count mismatch: expected {}, found {}",
            template.len(),
            loaded.len()
        )));
    }
    for (t, l) in template.iter().zip(loaded.iter()) {
        if t.name != l.name || t.value.shape != l.value.shape {
            return Err(ModelError::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                t.name, t.value.shape, l.name, l.value.shape
            )));
        }
    }
    Ok(())
}
