//! The segmentation network: shifted-window transformer encoder, CNN decoder
//! with skip connections, 6-channel head. Plus the pretraining variant that
//! swaps the decoder for the three pretext heads.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnMode, SwinBlock};
use crate::config::{HeadKind, ModelConfig, NUM_STAGES};
use crate::graph::{conv_neigh, ConvNeigh, Graph, NodeId};
use crate::params::{ParamKind, ParamStore};
use crate::windowing::{merge_plan, patchify_plan, transp_expand_plan};
use crate::{ModelError, Result};

const LEAKY_SLOPE: f64 = 0.01;

/// Two (conv3x3x3 -> instance norm -> leaky ReLU) layers.
pub struct ConvBlock {
    w1: usize,
    b1: usize,
    n1g: usize,
    n1b: usize,
    w2: usize,
    b2: usize,
    n2g: usize,
    n2b: usize,
    cin: usize,
    cout: usize,
}

impl ConvBlock {
    fn build(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Self {
        let w1 = store.add(&format!("{prefix}.conv1.weight"), ParamKind::Weight, vec![27 * cin, cout]);
        let b1 = store.add(&format!("{prefix}.conv1.bias"), ParamKind::Bias, vec![cout]);
        let n1g = store.add(&format!("{prefix}.in1.gamma"), ParamKind::NormScale, vec![cout]);
        let n1b = store.add(&format!("{prefix}.in1.beta"), ParamKind::NormShift, vec![cout]);
        let w2 = store.add(&format!("{prefix}.conv2.weight"), ParamKind::Weight, vec![27 * cout, cout]);
        let b2 = store.add(&format!("{prefix}.conv2.bias"), ParamKind::Bias, vec![cout]);
        let n2g = store.add(&format!("{prefix}.in2.gamma"), ParamKind::NormScale, vec![cout]);
        let n2b = store.add(&format!("{prefix}.in2.beta"), ParamKind::NormShift, vec![cout]);
        Self { w1, b1, n1g, n1b, w2, b2, n2g, n2b, cin, cout }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, neigh: &Arc<ConvNeigh>) -> NodeId {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let h = g.conv3d(x, w1, Some(b1), neigh.clone(), self.cin, self.cout);
        let n1g = g.param(self.n1g);
        let n1b = g.param(self.n1b);
        let h = g.col_norm(h, n1g, n1b, self.cout);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.conv3d(h, w2, Some(b2), neigh.clone(), self.cout, self.cout);
        let n2g = g.param(self.n2g);
        let n2b = g.param(self.n2b);
        let h = g.col_norm(h, n2g, n2b, self.cout);
        g.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// Transposed-conv (kernel 2 stride 2) upsample, skip concat, conv block.
struct UpBlock {
    transp_w: usize,
    conv: ConvBlock,
    cin: usize,
    cup: usize,
    cskip: usize,
}

impl UpBlock {
    fn build(store: &mut ParamStore, prefix: &str, cin: usize, cup: usize, cskip: usize, cout: usize) -> Self {
        let transp_w = store.add(&format!("{prefix}.transp.weight"), ParamKind::Weight, vec![cin, 8 * cup]);
        let conv = ConvBlock::build(store, prefix, cup + cskip, cout);
        Self { transp_w, conv, cin, cup, cskip }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        skip: NodeId,
        grid_in: [usize; 3],
        neigh_out: &Arc<ConvNeigh>,
    ) -> NodeId {
        let s_in = grid_in.iter().product::<usize>();
        let w = g.param(self.transp_w);
        let expanded = g.matmul(x, w, false, false, s_in, self.cin, 8 * self.cup);
        let up = g.gather(expanded, Arc::new(transp_expand_plan(grid_in, self.cup)));
        let cat = g.concat_cols(up, skip, self.cup, self.cskip);
        self.conv.forward(g, cat, neigh_out)
    }
}

struct Merge {
    norm_g: usize,
    norm_b: usize,
    red_w: usize,
    dim: usize,
}

impl Merge {
    fn build(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let norm_g = store.add(&format!("{prefix}.norm.gamma"), ParamKind::NormScale, vec![8 * dim]);
        let norm_b = store.add(&format!("{prefix}.norm.beta"), ParamKind::NormShift, vec![8 * dim]);
        let red_w = store.add(&format!("{prefix}.reduction.weight"), ParamKind::Weight, vec![8 * dim, 2 * dim]);
        Self { norm_g, norm_b, red_w, dim }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, grid: [usize; 3]) -> NodeId {
        let merged = g.gather(x, Arc::new(merge_plan(grid, self.dim)));
        let ng = g.param(self.norm_g);
        let nb = g.param(self.norm_b);
        let h = g.row_norm(merged, ng, nb, 8 * self.dim);
        let w = g.param(self.red_w);
        let rows = grid.iter().product::<usize>() / 8;
        g.matmul(h, w, false, false, rows, 8 * self.dim, 2 * self.dim)
    }
}

/// Token embedding plus the four transformer stages with patch merging.
pub struct SwinEncoder {
    pub config: ModelConfig,
    patch_w: usize,
    patch_b: usize,
    patch_ng: usize,
    patch_nb: usize,
    pub stages: Vec<Vec<SwinBlock>>,
    merges: Vec<Merge>,
}

pub struct EncoderOut {
    /// Stage outputs before merging: dims C, 2C, 4C, 8C.
    pub skips: [NodeId; NUM_STAGES],
    pub grids: [[usize; 3]; NUM_STAGES],
}

impl SwinEncoder {
    pub fn build(store: &mut ParamStore, config: &ModelConfig) -> Self {
        let c = config.embed_dim;
        let pvol = config.patch_size.iter().product::<usize>();
        let patch_w = store.add("patch_embed.weight", ParamKind::Weight, vec![pvol * config.in_channels, c]);
        let patch_b = store.add("patch_embed.bias", ParamKind::Bias, vec![c]);
        let patch_ng = store.add("patch_embed.norm.gamma", ParamKind::NormScale, vec![c]);
        let patch_nb = store.add("patch_embed.norm.beta", ParamKind::NormShift, vec![c]);

        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::new();
        for s in 0..NUM_STAGES {
            let dim = config.stage_dim(s);
            let grid = config.stage_grid(config.input_patch_shape, s);
            let window = [
                config.window_size[0].min(grid[0]),
                config.window_size[1].min(grid[1]),
                config.window_size[2].min(grid[2]),
            ];
            let blocks = (0..config.depths[s])
                .map(|b| {
                    SwinBlock::build(
                        store,
                        &format!("swin.stage{s}.block{b}"),
                        config,
                        dim,
                        config.num_heads[s],
                        window,
                    )
                })
                .collect();
            stages.push(blocks);
            if s < NUM_STAGES - 1 {
                merges.push(Merge::build(store, &format!("merge{s}"), dim));
            }
        }
        Self { config: config.clone(), patch_w, patch_b, patch_ng, patch_nb, stages, merges }
    }

    /// Token embedding: patch partition then linear projection and layer norm.
    pub fn embed(&self, g: &mut Graph, input: NodeId, shape: [usize; 3]) -> NodeId {
        let c = self.config.embed_dim;
        let cin = self.config.in_channels;
        let pvol = self.config.patch_size.iter().product::<usize>();
        let plan = Arc::new(patchify_plan(shape, self.config.patch_size, cin));
        let rows = plan.out_shape[0];
        let patches = g.gather(input, plan);
        let w = g.param(self.patch_w);
        let b = g.param(self.patch_b);
        let t = g.matmul(patches, w, false, false, rows, pvol * cin, c);
        let t = g.add_bias(t, b);
        let ng = g.param(self.patch_ng);
        let nb = g.param(self.patch_nb);
        g.row_norm(t, ng, nb, c)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: NodeId,
        shape: [usize; 3],
        dropout_on: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncoderOut> {
        let mut t = self.embed(g, input, shape);
        let mut skips = [NodeId(0); NUM_STAGES];
        let mut grids = [[0usize; 3]; NUM_STAGES];
        for s in 0..NUM_STAGES {
            let grid = self.config.stage_grid(shape, s);
            for (b, block) in self.stages[s].iter().enumerate() {
                let mode = if b % 2 == 0 { AttnMode::Window } else { AttnMode::ShiftedWindow };
                t = block.forward(g, t, grid, mode, dropout_on, rng)?;
            }
            skips[s] = t;
            grids[s] = grid;
            if s < NUM_STAGES - 1 {
                t = self.merges[s].forward(g, t, grid);
            }
        }
        Ok(EncoderOut { skips, grids })
    }

    /// Parameter-name prefixes that make up the transferable encoder.
    pub fn param_prefixes() -> [&'static str; 3] {
        ["patch_embed.", "swin.", "merge"]
    }
}

/// Full segmentation network.
pub struct SwinUnet {
    pub config: ModelConfig,
    pub encoder: SwinEncoder,
    stem: ConvBlock,
    skip_blocks: Vec<ConvBlock>,
    bottle: ConvBlock,
    ups: Vec<UpBlock>,
    head_w: usize,
    head_b: usize,
}

impl SwinUnet {
    /// Register all parameters (zero-valued) and return the wiring.
    pub fn build(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = SwinEncoder::build(&mut store, config);
        let c = config.embed_dim;
        let stem = ConvBlock::build(&mut store, "stem", config.in_channels, c);
        let skip_blocks: Vec<ConvBlock> = (0..3)
            .map(|s| {
                let dim = config.stage_dim(s);
                ConvBlock::build(&mut store, &format!("skip{s}"), dim, dim)
            })
            .collect();
        let bottle = ConvBlock::build(&mut store, "bottle", config.stage_dim(3), config.stage_dim(3));
        // up3: bottleneck (8C at g3) -> 4C at g2; ... up0: C at g0 -> C at full.
        let mut ups = Vec::with_capacity(4);
        for s in (0..3).rev() {
            let cin = config.stage_dim(s + 1);
            let cout = config.stage_dim(s);
            ups.push(UpBlock::build(&mut store, &format!("up{}", s + 1), cin, cout, cout, cout));
        }
        ups.push(UpBlock::build(&mut store, "up0", c, c, c, c));
        let head_w = store.add("head.weight", ParamKind::Weight, vec![c, config.num_classes]);
        let head_b = store.add("head.bias", ParamKind::Bias, vec![config.num_classes]);
        Ok((
            Self { config: config.clone(), encoder, stem, skip_blocks, bottle, ups, head_w, head_b },
            store,
        ))
    }

    /// Build the forward graph; returns per-voxel logits `(S, 6)`,
    /// channel-last z-major.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        shape: [usize; 3],
        dropout_on: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        self.config.validate_input_shape(shape)?;
        for a in 0..3 {
            if shape[a] < self.config.input_patch_shape[a] {
                return Err(ModelError::Validation(format!(
                    "input shape {shape:?} smaller than the configured patch {:?}",
                    self.config.input_patch_shape
                )));
            }
        }
        let enc = self.encoder.forward(g, input, shape, dropout_on, rng)?;

        let neigh_full = Arc::new(conv_neigh(shape, 3));
        let neighs: Vec<Arc<ConvNeigh>> =
            enc.grids.iter().map(|&grid| Arc::new(conv_neigh(grid, 3))).collect();

        let e0 = self.stem.forward(g, input, &neigh_full);
        let e: Vec<NodeId> = (0..3)
            .map(|s| self.skip_blocks[s].forward(g, enc.skips[s], &neighs[s]))
            .collect();
        let mut d = self.bottle.forward(g, enc.skips[3], &neighs[3]);
        // ups[0] = up3: g3 -> g2, ..., ups[2] = up1: g1 -> g0, ups[3]: g0 -> full.
        for (i, s) in (0..3).rev().enumerate() {
            d = self.ups[i].forward(g, d, e[s], enc.grids[s + 1], &neighs[s]);
        }
        d = self.ups[3].forward(g, d, e0, enc.grids[0], &neigh_full);

        let s_full = shape.iter().product::<usize>();
        let hw = g.param(self.head_w);
        let hb = g.param(self.head_b);
        let logits = g.matmul(d, hw, false, false, s_full, self.config.embed_dim, self.config.num_classes);
        Ok(g.add_bias(logits, hb))
    }

    /// Per-channel probabilities per the configured head convention.
    pub fn probabilities(&self, g: &mut Graph, logits: NodeId) -> NodeId {
        match self.config.head {
            HeadKind::Sigmoid => g.sigmoid(logits),
            HeadKind::Softmax => g.softmax_rows(logits, self.config.num_classes),
        }
    }
}

/// Pretext heads attached to the encoder bottleneck for self-supervised
/// pretraining. Discarded after pretraining; only encoder weights transfer.
pub struct PretrainNet {
    pub config: ModelConfig,
    pub encoder: SwinEncoder,
    /// Sub-volume shape the heads are sized for.
    pub subvol: [usize; 3],
    rot_w: usize,
    rot_b: usize,
    proj_w: usize,
    proj_b: usize,
    /// (param index, cin, cout) per upsampling step.
    recon_ups: Vec<(usize, usize, usize)>,
    recon_out_w: usize,
    recon_out_b: usize,
    pub contrast_dim: usize,
}

pub struct PretrainOut {
    /// 4-way rotation logits `(1, 4)`.
    pub rot_logits: NodeId,
    /// Contrastive embedding `(1, contrast_dim)`, unnormalized.
    pub embedding: NodeId,
    /// Reconstruction `(S, 1)` at input resolution.
    pub recon: NodeId,
}

impl PretrainNet {
    pub fn build(config: &ModelConfig, subvol: [usize; 3], contrast_dim: usize) -> Result<(Self, ParamStore)> {
        config.validate()?;
        config.validate_input_shape(subvol)?;
        let mut store = ParamStore::new();
        let encoder = SwinEncoder::build(&mut store, config);
        let cb = config.bottleneck_dim();
        let g3 = config.stage_grid(subvol, 3);
        let s3 = g3.iter().product::<usize>();
        let rot_w = store.add("pretrain.rot.weight", ParamKind::Weight, vec![s3 * cb, 4]);
        let rot_b = store.add("pretrain.rot.bias", ParamKind::Bias, vec![4]);
        let proj_w = store.add("pretrain.proj.weight", ParamKind::Weight, vec![cb, contrast_dim]);
        let proj_b = store.add("pretrain.proj.bias", ParamKind::Bias, vec![contrast_dim]);
        // Reconstruction: four transposed convs back to full resolution,
        // halving channels down to embed_dim.
        let mut recon_ups = Vec::with_capacity(4);
        let mut cin = cb;
        for i in 0..4 {
            let cout = (cin / 2).max(config.embed_dim);
            let idx = store.add(
                &format!("pretrain.recon.up{i}.weight"),
                ParamKind::Weight,
                vec![cin, 8 * cout],
            );
            recon_ups.push((idx, cin, cout));
            cin = cout;
        }
        let recon_out_w = store.add("pretrain.recon.out.weight", ParamKind::Weight, vec![cin, 1]);
        let recon_out_b = store.add("pretrain.recon.out.bias", ParamKind::Bias, vec![1]);
        Ok((
            Self {
                config: config.clone(),
                encoder,
                subvol,
                rot_w,
                rot_b,
                proj_w,
                proj_b,
                recon_ups,
                recon_out_w,
                recon_out_b,
                contrast_dim,
            },
            store,
        ))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        dropout_on: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PretrainOut> {
        let shape = self.subvol;
        let enc = self.encoder.forward(g, input, shape, dropout_on, rng)?;
        let bott = enc.skips[3];
        let cb = self.config.bottleneck_dim();
        let g3 = enc.grids[3];
        let s3 = g3.iter().product::<usize>();

        // Rotation: flatten the bottleneck.
        let rw = g.param(self.rot_w);
        let rb = g.param(self.rot_b);
        let rot = g.matmul(bott, rw, false, false, 1, s3 * cb, 4);
        let rot_logits = g.add_bias(rot, rb);

        // Contrastive: pooled bottleneck -> linear projection.
        let pooled = g.mean_rows(bott, cb);
        let pw = g.param(self.proj_w);
        let pb = g.param(self.proj_b);
        let emb = g.matmul(pooled, pw, false, false, 1, cb, self.contrast_dim);
        let embedding = g.add_bias(emb, pb);

        // Reconstruction: transposed convs up to input resolution.
        let mut x = bott;
        let mut grid = g3;
        let mut last_cout = cb;
        for &(w_idx, cin, cout) in &self.recon_ups {
            let s_in = grid.iter().product::<usize>();
            let w = g.param(w_idx);
            let expanded = g.matmul(x, w, false, false, s_in, cin, 8 * cout);
            x = g.gather(expanded, Arc::new(transp_expand_plan(grid, cout)));
            x = g.leaky_relu(x, LEAKY_SLOPE);
            grid = [grid[0] * 2, grid[1] * 2, grid[2] * 2];
            last_cout = cout;
        }
        debug_assert_eq!(grid, shape);
        let ow = g.param(self.recon_out_w);
        let ob = g.param(self.recon_out_b);
        let s_full = shape.iter().product::<usize>();
        let recon = g.matmul(x, ow, false, false, s_full, last_cout, 1);
        let recon = g.add_bias(recon, ob);

        Ok(PretrainOut { rot_logits, embedding, recon })
    }
}
