//! Windowed multi-head self-attention and the transformer block around it.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamKind, ParamStore};
use crate::windowing::{
    attention_mask, head_merge_plan, qkv_head_plan, rel_pos_index, rel_pos_table_size, roll_plan,
    window_plan,
};
use crate::{ModelError, Result};

/// Attention flavour: plain windows or cyclically shifted windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    Window,
    ShiftedWindow,
}

pub struct AttnOut {
    pub out: NodeId,
    /// Softmax probabilities `(n_windows * heads * tokens, tokens)`,
    /// exposed for masking diagnostics.
    pub probs: NodeId,
    pub n_windows: usize,
    pub tokens: usize,
    pub heads: usize,
}

/// Multi-head self-attention within (optionally shifted) local windows, with
/// a learned relative position bias per head.
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    /// Window fixed at build time from the configured input shape.
    pub window: [usize; 3],
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    table: usize,
    rel_idx: Arc<Vec<u32>>,
}

impl WindowAttention {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: [usize; 3],
    ) -> Self {
        let qkv_w = store.add(&format!("{prefix}.qkv.weight"), ParamKind::Weight, vec![dim, 3 * dim]);
        let qkv_b = store.add(&format!("{prefix}.qkv.bias"), ParamKind::Bias, vec![3 * dim]);
        let proj_w = store.add(&format!("{prefix}.proj.weight"), ParamKind::Weight, vec![dim, dim]);
        let proj_b = store.add(&format!("{prefix}.proj.bias"), ParamKind::Bias, vec![dim]);
        let table = store.add(
            &format!("{prefix}.rel_bias.table"),
            ParamKind::Table,
            vec![rel_pos_table_size(window), heads],
        );
        Self { dim, heads, window, qkv_w, qkv_b, proj_w, proj_b, table, rel_idx: rel_pos_index(window) }
    }

    /// Shift applied on each axis in shifted mode: half the window where the
    /// grid is larger than the window, zero otherwise.
    pub fn shift_for(&self, grid: [usize; 3], mode: AttnMode) -> [usize; 3] {
        let mut shift = [0usize; 3];
        if mode == AttnMode::ShiftedWindow {
            for a in 0..3 {
                if grid[a] > self.window[a] {
                    shift[a] = self.window[a] / 2;
                }
            }
        }
        shift
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        grid: [usize; 3],
        mode: AttnMode,
    ) -> Result<AttnOut> {
        let plan = window_plan(grid, self.window, self.dim);
        if plan.window != self.window {
            return Err(ModelError::Validation(format!(
                "grid {grid:?} smaller than the configured window {:?}",
                self.window
            )));
        }
        let shift = self.shift_for(grid, mode);
        let has_shift = shift.iter().any(|&s| s > 0);

        let shifted = if has_shift {
            let off = [shift[0] as i64, shift[1] as i64, shift[2] as i64];
            g.gather(x, Arc::new(roll_plan(grid, off, self.dim)))
        } else {
            x
        };
        let win = g.gather(shifted, plan.partition.clone());

        let (n_w, t, heads) = (plan.n_windows, plan.tokens, self.heads);
        let dh = self.dim / heads;
        let rows = n_w * t;

        let qkv_w = g.param(self.qkv_w);
        let qkv_b = g.param(self.qkv_b);
        let qkv = g.matmul(win, qkv_w, false, false, rows, self.dim, 3 * self.dim);
        let qkv = g.add_bias(qkv, qkv_b);

        let q = g.gather(qkv, Arc::new(qkv_head_plan(n_w, t, heads, dh, 0)));
        let k = g.gather(qkv, Arc::new(qkv_head_plan(n_w, t, heads, dh, 1)));
        let v = g.gather(qkv, Arc::new(qkv_head_plan(n_w, t, heads, dh, 2)));

        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let scores = g.bmm(q, k, true, n_w * heads, t, dh, t);
        let table = g.param(self.table);
        let scores = g.rel_bias_add(scores, table, self.rel_idx.clone(), n_w, heads, t);
        let scores = match attention_mask(&plan, shift) {
            Some(mask) => g.add_window_mask(scores, mask, n_w, heads, t),
            None => scores,
        };
        let probs = g.softmax_rows(scores, t);
        let ctx = g.bmm(probs, v, false, n_w * heads, t, t, dh);
        let merged = g.gather(ctx, Arc::new(head_merge_plan(n_w, t, heads, dh)));

        let proj_w = g.param(self.proj_w);
        let proj_b = g.param(self.proj_b);
        let out = g.matmul(merged, proj_w, false, false, rows, self.dim, self.dim);
        let out = g.add_bias(out, proj_b);

        let back = g.gather(out, plan.reverse.clone());
        let out = if has_shift {
            let off = [-(shift[0] as i64), -(shift[1] as i64), -(shift[2] as i64)];
            g.gather(back, Arc::new(roll_plan(grid, off, self.dim)))
        } else {
            back
        };
        Ok(AttnOut { out, probs, n_windows: n_w, tokens: t, heads })
    }
}

/// Pre-norm transformer block:
/// `x + Drop(MSA(LN(x)))` then `+ Drop(MLP(LN(x)))`.
pub struct SwinBlock {
    pub attn: WindowAttention,
    norm1_g: usize,
    norm1_b: usize,
    norm2_g: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    dim: usize,
    hidden: usize,
    dropout_rate: f64,
}

impl SwinBlock {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        config: &ModelConfig,
        dim: usize,
        heads: usize,
        window: [usize; 3],
    ) -> Self {
        let norm1_g = store.add(&format!("{prefix}.norm1.gamma"), ParamKind::NormScale, vec![dim]);
        let norm1_b = store.add(&format!("{prefix}.norm1.beta"), ParamKind::NormShift, vec![dim]);
        let attn = WindowAttention::build(store, &format!("{prefix}.attn"), dim, heads, window);
        let norm2_g = store.add(&format!("{prefix}.norm2.gamma"), ParamKind::NormScale, vec![dim]);
        let norm2_b = store.add(&format!("{prefix}.norm2.beta"), ParamKind::NormShift, vec![dim]);
        let hidden = dim * config.mlp_ratio;
        let fc1_w = store.add(&format!("{prefix}.mlp.fc1.weight"), ParamKind::Weight, vec![dim, hidden]);
        let fc1_b = store.add(&format!("{prefix}.mlp.fc1.bias"), ParamKind::Bias, vec![hidden]);
        let fc2_w = store.add(&format!("{prefix}.mlp.fc2.weight"), ParamKind::Weight, vec![hidden, dim]);
        let fc2_b = store.add(&format!("{prefix}.mlp.fc2.bias"), ParamKind::Bias, vec![dim]);
        Self {
            attn,
            norm1_g,
            norm1_b,
            norm2_g,
            norm2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            dim,
            hidden,
            dropout_rate: config.dropout_rate,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        grid: [usize; 3],
        mode: AttnMode,
        dropout_on: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let rows = grid.iter().product::<usize>();
        let g1 = g.param(self.norm1_g);
        let b1 = g.param(self.norm1_b);
        let h = g.row_norm(x, g1, b1, self.dim);
        let attn = self.attn.forward(g, h, grid, mode)?;
        let a = if dropout_on && self.dropout_rate > 0.0 {
            g.dropout(attn.out, self.dropout_rate, rng)
        } else {
            attn.out
        };
        let x2 = g.add(x, a);

        let g2 = g.param(self.norm2_g);
        let b2 = g.param(self.norm2_b);
        let h2 = g.row_norm(x2, g2, b2, self.dim);
        let w1 = g.param(self.fc1_w);
        let bb1 = g.param(self.fc1_b);
        let m = g.matmul(h2, w1, false, false, rows, self.dim, self.hidden);
        let m = g.add_bias(m, bb1);
        let m = g.gelu(m);
        let w2 = g.param(self.fc2_w);
        let bb2 = g.param(self.fc2_b);
        let m = g.matmul(m, w2, false, false, rows, self.hidden, self.dim);
        let m = g.add_bias(m, bb2);
        let m = if dropout_on && self.dropout_rate > 0.0 {
            g.dropout(m, self.dropout_rate, rng)
        } else {
            m
        };
        Ok(g.add(x2, m))
    }

    /// Forward that also returns the attention probabilities (diagnostics).
    pub fn forward_with_probs(
        &self,
        g: &mut Graph,
        x: NodeId,
        grid: [usize; 3],
        mode: AttnMode,
    ) -> Result<(NodeId, AttnOut)> {
        let g1 = g.param(self.norm1_g);
        let b1 = g.param(self.norm1_b);
        let h = g.row_norm(x, g1, b1, self.dim);
        let attn = self.attn.forward(g, h, grid, mode)?;
        let x2 = g.add(x, attn.out);
        let g2 = g.param(self.norm2_g);
        let b2 = g.param(self.norm2_b);
        let h2 = g.row_norm(x2, g2, b2, self.dim);
        let rows = grid.iter().product::<usize>();
        let w1 = g.param(self.fc1_w);
        let bb1 = g.param(self.fc1_b);
        let m = g.matmul(h2, w1, false, false, rows, self.dim, self.hidden);
        let m = g.add_bias(m, bb1);
        let m = g.gelu(m);
        let w2 = g.param(self.fc2_w);
        let bb2 = g.param(self.fc2_b);
        let m = g.matmul(m, w2, false, false, rows, self.hidden, self.dim);
        let m = g.add_bias(m, bb2);
        let out = g.add(x2, m);
        Ok((out, attn))
    }
}
