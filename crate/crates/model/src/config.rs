//! Network configuration.

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

/// Output head nonlinearity used to turn logits into per-channel
/// probabilities. Discrete labels are always argmax over the 6 channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Sigmoid,
    Softmax,
}

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Patch-partition size per axis.
    pub patch_size: [usize; 3],
    /// Embedding channels at the first stage; doubles per stage.
    pub embed_dim: usize,
    /// Transformer blocks per stage.
    pub depths: [usize; NUM_STAGES],
    /// Attention heads per stage.
    pub num_heads: [usize; NUM_STAGES],
    /// Attention window per axis (clipped to the stage grid).
    pub window_size: [usize; 3],
    /// MLP hidden expansion.
    pub mlp_ratio: usize,
    /// Dropout probability used by every block when dropout is on.
    pub dropout_rate: f64,
    /// Training patch shape (D, H, W).
    pub input_patch_shape: [usize; 3],
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 6,
            patch_size: [2, 2, 2],
            embed_dim: 12,
            depths: [2, 2, 2, 2],
            num_heads: [3, 6, 12, 24],
            window_size: [4, 4, 4],
            mlp_ratio: 4,
            dropout_rate: 0.5,
            input_patch_shape: [32, 32, 32],
            head: HeadKind::Sigmoid,
        }
    }
}

impl ModelConfig {
    /// Paper-scale configuration (feature depth 48, 96^3 patches, window 7).
    pub fn paper_scale() -> Self {
        Self {
            embed_dim: 48,
            window_size: [7, 7, 7],
            input_patch_shape: [96, 96, 96],
            ..Self::default()
        }
    }

    /// Channel width at stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token grid at stage `s` for a given input shape.
    pub fn stage_grid(&self, input: [usize; 3], s: usize) -> [usize; 3] {
        let mut g = [0; 3];
        for a in 0..3 {
            g[a] = input[a] / self.patch_size[a] >> s;
        }
        g
    }

    /// Bottleneck channel width (after the last stage).
    pub fn bottleneck_dim(&self) -> usize {
        self.stage_dim(NUM_STAGES - 1)
    }

    /// Per-axis divisibility every input shape must satisfy: the patch
    /// partition plus the three patch mergings.
    pub fn shape_divisor(&self) -> [usize; 3] {
        self.patch_size.map(|p| p * (1 << (NUM_STAGES - 1)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 6 {
            return Err(ModelError::Validation(format!(
                "num_classes must be 6, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 {
            return Err(ModelError::Validation("in_channels must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::Validation("embed_dim must be >= 1".into()));
        }
        for s in 0..NUM_STAGES {
            let dim = self.stage_dim(s);
            let heads = self.num_heads[s];
            if heads == 0 || dim % heads != 0 {
                return Err(ModelError::Validation(format!(
                    "stage {s}: dim {dim} not divisible by heads {heads}"
                )));
            }
            if self.depths[s] == 0 {
                return Err(ModelError::Validation(format!(
                    "stage {s}: depth must be >= 1"
                )));
            }
        }
        if self.window_size.iter().any(|&w| w == 0) {
            return Err(ModelError::Validation("window size must be >= 1".into()));
        }
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(ModelError::Validation("patch size must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::Validation("mlp_ratio must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Validation(format!(
                "dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        self.validate_input_shape(self.input_patch_shape)?;
        Ok(())
    }

    /// Check that a runtime input shape is compatible with the architecture.
    pub fn validate_input_shape(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.shape_divisor();
        for a in 0..3 {
            if shape[a] == 0 || shape[a] % div[a] != 0 {
                return Err(ModelError::Validation(format!(
                    "input shape {shape:?} must be divisible by {div:?} per axis"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = ModelConfig { embed_dim: 10, ..ModelConfig::default() };
        // stage dims 10,20,40,80 vs heads 3,6,12,24
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_shape_divisibility() {
        let cfg = ModelConfig::default();
        assert!(cfg.validate_input_shape([32, 32, 32]).is_ok());
        assert!(cfg.validate_input_shape([64, 32, 48]).is_ok());
        assert!(cfg.validate_input_shape([30, 32, 32]).is_err());
    }

    #[test]
    fn stage_geometry() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stage_grid([32, 32, 32], 0), [16, 16, 16]);
        assert_eq!(cfg.stage_grid([32, 32, 32], 3), [2, 2, 2]);
        assert_eq!(cfg.stage_dim(3), 96);
        assert_eq!(cfg.shape_divisor(), [16, 16, 16]);
    }
}
