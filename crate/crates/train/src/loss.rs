//! Segmentation training loss: soft Dice plus voxel-wise cross-entropy.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use volseg_model::{Graph, HeadKind, NodeId, ParamStore};

use crate::{Result, TrainError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

/// Build `w_dice * softDice(probs(logits)) + w_ce * CE(logits)` on the graph.
///
/// The Dice term uses probabilities per the head convention (sigmoid per
/// channel by default); cross-entropy is always softmax-based across the 6
/// channels. Zero-weighted terms are skipped entirely.
pub fn seg_loss_graph(
    g: &mut Graph,
    logits: NodeId,
    labels: Arc<Vec<u32>>,
    weights: LossWeights,
    head: HeadKind,
) -> NodeId {
    let k = 6;
    let mut terms: Vec<NodeId> = Vec::new();
    if weights.ce != 0.0 {
        let ce = g.softmax_ce_loss(logits, labels.clone(), k);
        terms.push(g.scale(ce, weights.ce));
    }
    if weights.dice != 0.0 {
        let probs = match head {
            HeadKind::Sigmoid => g.sigmoid(logits),
            HeadKind::Softmax => g.softmax_rows(logits, k),
        };
        let dice = g.soft_dice_loss(probs, labels, k);
        terms.push(g.scale(dice, weights.dice));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    total
}

/// Convenience wrapper on plain channel-last logits `(S, 6)`.
pub fn seg_loss(logits: &[f64], labels: &[u8], weights: LossWeights, head: HeadKind) -> Result<f64> {
    if logits.len() != labels.len() * 6 {
        return Err(TrainError::Validation(format!(
            "logits length {} does not match {} labels x 6 channels",
            logits.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 5) {
        return Err(TrainError::Validation("labels must lie in 0..=5".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::Numeric { message: "non-finite logits".into(), iteration: 0 });
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let node = g.input(volseg_model::Tensor::new(vec![labels.len(), 6], logits.to_vec()));
    let labels: Arc<Vec<u32>> = Arc::new(labels.iter().map(|&l| l as u32).collect());
    let loss = seg_loss_graph(&mut g, node, labels, weights, head);
    Ok(g.value(loss).data[0])
}
