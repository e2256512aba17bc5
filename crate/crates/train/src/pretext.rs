//! Pretext task construction and losses: 4-way rotation prediction,
//! inpainting of cut-out blocks, and contrastive view matching.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use volseg_core::rng::{stream_rng, Domain};
use volseg_core::Volume;
use volseg_model::net::{PretrainNet, PretrainOut};
use volseg_model::{Graph, NodeId, Tensor};

use crate::{Result, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    /// Cubic sub-volume edge (cubic so 90-degree rotations are lossless).
    pub subvol_shape: [usize; 3],
    /// Sub-volumes per batch; each contributes two augmented views.
    pub batch_size: usize,
    /// Target fraction of voxels covered by cut-out blocks, in [0.1, 0.5].
    pub cutout_fraction: f64,
    /// Value written into cut-out voxels.
    pub cutout_fill: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub w_rotation: f64,
    pub w_inpaint: f64,
    pub w_contrast: f64,
    /// Contrastive embedding width.
    pub contrast_dim: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            subvol_shape: [32, 32, 32],
            batch_size: 2,
            cutout_fraction: 0.25,
            cutout_fill: 0.0,
            temperature: 0.1,
            w_rotation: 1.0,
            w_inpaint: 1.0,
            w_contrast: 1.0,
            contrast_dim: 64,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.subvol_shape;
        if s[0] != s[1] || s[1] != s[2] || s[0] == 0 {
            return Err(TrainError::Validation(format!(
                "sub-volume shape {s:?} must be cubic (lossless 90-degree rotations)"
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Validation("batch_size must be >= 1".into()));
        }
        if !(0.1..=0.5).contains(&self.cutout_fraction) {
            return Err(TrainError::Validation(format!(
                "cutout_fraction {} must lie in [0.1, 0.5]",
                self.cutout_fraction
            )));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Validation("temperature must be positive".into()));
        }
        if self.w_rotation < 0.0 || self.w_inpaint < 0.0 || self.w_contrast < 0.0 {
            return Err(TrainError::Validation("loss weights must be >= 0".into()));
        }
        if self.contrast_dim == 0 {
            return Err(TrainError::Validation("contrast_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One augmented view of a sub-volume.
#[derive(Clone, Debug)]
pub struct PretextView {
    /// Encoder input: rotated sub-volume with cut-out blocks filled.
    pub data: Vec<f64>,
    /// Reconstruction target: the rotated sub-volume before cut-out.
    pub target: Vec<f64>,
    /// 1.0 on cut-out voxels, 0.0 elsewhere.
    pub mask: Vec<f64>,
    /// Number of quarter turns applied (0..=3).
    pub rotation: u8,
    /// Rotation axis (0 = z, 1 = y, 2 = x).
    pub axis: u8,
    /// Source sub-volume id; the two views of a sub-volume share it.
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct PretextBatch {
    pub views: Vec<PretextView>,
    pub shape: [usize; 3],
}

/// One quarter turn of a cubic grid about `axis`.
fn rot90_once(data: &[f64], n: usize, axis: u8) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let idx = |z: usize, y: usize, x: usize| (z * n + y) * n + x;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let src = match axis {
                    0 => idx(z, x, n - 1 - y),
                    1 => idx(x, y, n - 1 - z),
                    _ => idx(y, n - 1 - z, x),
                };
                out[idx(z, y, x)] = data[src];
            }
        }
    }
    out
}

/// `k` lossless quarter turns about `axis`.
pub fn rot90(data: &[f64], n: usize, axis: u8, k: u8) -> Vec<f64> {
    let mut out = data.to_vec();
    for _ in 0..(k % 4) {
        out = rot90_once(&out, n, axis);
    }
    out
}

/// Build a deterministic pretext batch from unlabeled volumes.
pub fn make_pretext_batch(
    volumes: &[Volume],
    cfg: &PretextConfig,
    seed: u64,
) -> Result<PretextBatch> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(TrainError::Validation("no volumes to sample from".into()));
    }
    let sub = cfg.subvol_shape;
    for v in volumes {
        let shape = v.shape();
        if (0..3).any(|a| sub[a] > shape[a]) {
            return Err(TrainError::Validation(format!(
                "sub-volume {sub:?} larger than source volume {shape:?}"
            )));
        }
    }
    let n = sub[0];
    let voxels = n * n * n;
    let mut rng = stream_rng(seed, Domain::Pretext, 0);
    let mut views = Vec::with_capacity(cfg.batch_size * 2);
    for group in 0..cfg.batch_size {
        let vol = &volumes[rng.gen_range(0..volumes.len())];
        let shape = vol.shape();
        let corner = [
            rng.gen_range(0..=shape[0] - n),
            rng.gen_range(0..=shape[1] - n),
            rng.gen_range(0..=shape[2] - n),
        ];
        let mut subvol = Vec::with_capacity(voxels);
        for z in 0..n {
            for y in 0..n {
                let row = vol.index(corner[0] + z, corner[1] + y, corner[2]);
                subvol.extend(vol.data()[row..row + n].iter().map(|&v| v as f64));
            }
        }
        for _ in 0..2 {
            let axis = rng.gen_range(0..3u8);
            let k = rng.gen_range(0..4u8);
            let target = rot90(&subvol, n, axis, k);
            let (mut data, mask) = cutout(&target, n, cfg, &mut rng);
            for (d, &m) in data.iter_mut().zip(&mask) {
                if m != 0.0 {
                    *d = cfg.cutout_fill;
                }
            }
            views.push(PretextView { data, target, mask, rotation: k, axis, group });
        }
    }
    Ok(PretextBatch { views, shape: sub })
}

/// Random rectangular blocks until the target fraction is covered. Block
/// edges are capped at a quarter of the cube so the overshoot stays small.
fn cutout(
    data: &[f64],
    n: usize,
    cfg: &PretextConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let voxels = n * n * n;
    let target = (cfg.cutout_fraction * voxels as f64) as usize;
    let mut mask = vec![0.0f64; voxels];
    let mut covered = 0usize;
    let max_edge = (n / 4).max(2);
    while covered < target {
        let dims = [
            rng.gen_range(2..=max_edge),
            rng.gen_range(2..=max_edge),
            rng.gen_range(2..=max_edge),
        ];
        let corner = [
            rng.gen_range(0..=n - dims[0]),
            rng.gen_range(0..=n - dims[1]),
            rng.gen_range(0..=n - dims[2]),
        ];
        for z in corner[0]..corner[0] + dims[0] {
            for y in corner[1]..corner[1] + dims[1] {
                for x in corner[2]..corner[2] + dims[2] {
                    let i = (z * n + y) * n + x;
                    if mask[i] == 0.0 {
                        mask[i] = 1.0;
                        covered += 1;
                    }
                }
            }
        }
    }
    (data.to_vec(), mask)
}

/// Loss nodes for one pretext batch.
pub struct PretextLossNodes {
    pub rotation: NodeId,
    pub inpaint: NodeId,
    pub contrast: Option<NodeId>,
    pub total: NodeId,
}

/// Build the joint pretext objective on a graph:
/// `w_rot * CE(rotation) + w_inp * maskedL1(recon) + w_con * InfoNCE`.
pub fn pretext_loss_graph(
    g: &mut Graph,
    net: &PretrainNet,
    batch: &PretextBatch,
    cfg: &PretextConfig,
    dropout_on: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PretextLossNodes> {
    let n_views = batch.views.len();
    let n_groups = n_views / 2;
    if cfg.w_contrast > 0.0 && n_groups < 2 {
        return Err(TrainError::Validation(
            "contrastive loss needs a batch of at least 2 sub-volumes (no negatives otherwise)"
                .into(),
        ));
    }
    let voxels: usize = batch.shape.iter().product();

    let mut outs: Vec<PretrainOut> = Vec::with_capacity(n_views);
    for view in &batch.views {
        let input = g.input(Tensor::new(vec![voxels, 1], view.data.clone()));
        outs.push(net.forward_graph(g, input, dropout_on, rng)?);
    }

    // Rotation: 4-way cross-entropy over all views.
    let rot_rows: Vec<NodeId> = outs.iter().map(|o| o.rot_logits).collect();
    let rot_stack = g.stack_rows(&rot_rows, 4);
    let rot_labels: Arc<Vec<u32>> =
        Arc::new(batch.views.iter().map(|v| v.rotation as u32).collect());
    let rotation = g.softmax_ce_loss(rot_stack, rot_labels, 4);

    // Inpainting: masked L1 against the uncut rotated view, averaged.
    let mut inpaint_sum: Option<NodeId> = None;
    for (view, out) in batch.views.iter().zip(&outs) {
        let target = Arc::new(view.target.clone());
        let mask = Arc::new(view.mask.clone());
        let l = g.masked_l1_loss(out.recon, target, mask);
        inpaint_sum = Some(match inpaint_sum {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    let inpaint = g.scale(inpaint_sum.expect("at least one view"), 1.0 / n_views as f64);

    // Contrastive: InfoNCE over L2-normalized embeddings; the positive of a
    // view is the other view of its sub-volume, self-similarity is masked.
    let contrast = if cfg.w_contrast > 0.0 {
        let emb_rows: Vec<NodeId> = outs.iter().map(|o| o.embedding).collect();
        let stack = g.stack_rows(&emb_rows, cfg.contrast_dim);
        let z = g.l2_normalize_rows(stack, cfg.contrast_dim);
        let sims = g.matmul(z, z, false, true, n_views, cfg.contrast_dim, n_views);
        let sims = g.scale(sims, 1.0 / cfg.temperature);
        let mut diag = vec![0.0f64; n_views * n_views];
        for i in 0..n_views {
            diag[i * n_views + i] = -1e9;
        }
        let diag = g.input(Tensor::new(vec![n_views, n_views], diag));
        let sims = g.add(sims, diag);
        let partners: Arc<Vec<u32>> = Arc::new((0..n_views).map(|i| (i ^ 1) as u32).collect());
        Some(g.softmax_ce_loss(sims, partners, n_views))
    } else {
        None
    };

    let wr = g.scale(rotation, cfg.w_rotation);
    let wi = g.scale(inpaint, cfg.w_inpaint);
    let mut total = g.add(wr, wi);
    if let Some(c) = contrast {
        let wc = g.scale(c, cfg.w_contrast);
        total = g.add(total, wc);
    }
    Ok(PretextLossNodes { rotation, inpaint, contrast, total })
}

/// InfoNCE on hand-set embeddings: `partners[i]` is the positive row of
/// row `i`. Uses the same graph ops as training.
pub fn info_nce(embeddings: &[Vec<f64>], partners: &[usize], tau: f64) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 || partners.len() != n {
        return Err(TrainError::Validation("need >= 2 embeddings with partners".into()));
    }
    let dim = embeddings[0].len();
    let store = volseg_model::ParamStore::new();
    let mut g = Graph::new(&store);
    let rows: Vec<NodeId> = embeddings
        .iter()
        .map(|e| g.input(Tensor::new(vec![1, dim], e.clone())))
        .collect();
    let stack = g.stack_rows(&rows, dim);
    let z = g.l2_normalize_rows(stack, dim);
    let sims = g.matmul(z, z, false, true, n, dim, n);
    let sims = g.scale(sims, 1.0 / tau);
    let mut diag = vec![0.0f64; n * n];
    for i in 0..n {
        diag[i * n + i] = -1e9;
    }
    let diag = g.input(Tensor::new(vec![n, n], diag));
    let sims = g.add(sims, diag);
    let labels: Arc<Vec<u32>> = Arc::new(partners.iter().map(|&p| p as u32).collect());
    let loss = g.softmax_ce_loss(sims, labels, n);
    Ok(g.value(loss).data[0])
}
