//! Reverse-mode autodiff tape over flat f64 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves are either
//! constants (inputs, masks) or parameters bound to a [`ParamStore`]; every
//! operation computes its value eagerly and records a backward step.
//! `backward` walks the steps in reverse, accumulating gradients; parameter
//! gradients are then exported into a [`GradStore`].
//!
//! All computation is f64 and serial, so results are bitwise deterministic.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradStore, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// A block-copy plan: output chunk `t` of length `block` is copied from the
/// flat element offset `src[t]` of the input (`-1` fills with zeros).
/// Backward scatter-adds chunks serially, so duplicate sources are fine.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    pub src: Vec<i64>,
    pub block: usize,
    pub out_shape: Vec<usize>,
}

impl GatherPlan {
    pub fn out_len(&self) -> usize {
        self.src.len() * self.block
    }

    /// Apply to a plain tensor (shared by the graph op and plan tests).
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len()];
        for (t, &s) in self.src.iter().enumerate() {
            if s >= 0 {
                let s = s as usize;
                out[t * self.block..(t + 1) * self.block]
                    .copy_from_slice(&input[s..s + self.block]);
            }
        }
        out
    }
}

trait Op {
    fn backward(&self, values: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]);
}

fn take_grad(grads: &mut [Option<Vec<f64>>], id: NodeId) -> Option<Vec<f64>> {
    grads[id.0].take()
}

fn acc_grad<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    needs: &[bool],
    id: NodeId,
    len: usize,
) -> Option<&'a mut Vec<f64>> {
    if !needs[id.0] {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    param_of: Vec<Option<usize>>,
    steps: Vec<Box<dyn Op>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            param_of: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, t: Tensor, needs: bool, param: Option<usize>) -> NodeId {
        self.values.push(t);
        self.grads.push(None);
        self.needs.push(needs);
        self.param_of.push(param);
        NodeId(self.values.len() - 1)
    }

    fn push_op(&mut self, t: Tensor, needs: bool, op: Box<dyn Op>) -> NodeId {
        let id = self.push(t, needs, None);
        if needs {
            self.steps.push(op);
        }
        id
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, None)
    }

    /// Parameter leaf bound to the store by index.
    pub fn param(&mut self, idx: usize) -> NodeId {
        let t = self.store.get(idx).value.clone();
        self.push(t, true, Some(idx))
    }

    /// Run backward from a scalar node and export parameter gradients.
    pub fn backward(&mut self, loss: NodeId, out: &mut GradStore) {
        assert_eq!(self.values[loss.0].numel(), 1, "backward needs a scalar");
        self.grads[loss.0] = Some(vec![1.0]);
        for op in self.steps.iter().rev() {
            op.backward(&self.values, &mut self.grads, &self.needs);
        }
        for (i, p) in self.param_of.iter().enumerate() {
            if let (Some(pidx), Some(g)) = (p, self.grads[i].take()) {
                let acc = out.get_mut(*pidx);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

struct AddOp {
    a: NodeId,
    b: NodeId,
    out: NodeId,
}

impl Op for AddOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        for id in [self.a, self.b] {
            if let Some(acc) = acc_grad(grads, needs, id, g.len()) {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
    }
}

struct AddBiasOp {
    x: NodeId,
    bias: NodeId,
    out: NodeId,
    cols: usize,
}

impl Op for AddBiasOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.x, g.len()) {
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        if let Some(acc) = acc_grad(grads, needs, self.bias, self.cols) {
            for (r, chunk) in g.chunks_exact(self.cols).enumerate() {
                let _ = r;
                for (a, gi) in acc.iter_mut().zip(chunk) {
                    *a += gi;
                }
            }
        }
    }
}

struct ScaleOp {
    x: NodeId,
    out: NodeId,
    c: f64,
}

impl Op for ScaleOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.x, g.len()) {
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += self.c * gi;
            }
        }
    }
}

struct MulOp {
    a: NodeId,
    b: NodeId,
    out: NodeId,
}

impl Op for MulOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if needs[self.a.0] {
            let bv = &v[self.b.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.a, g.len()) {
                for i in 0..g.len() {
                    acc[i] += g[i] * bv[i];
                }
            }
        }
        if needs[self.b.0] {
            let av = &v[self.a.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.b, g.len()) {
                for i in 0..g.len() {
                    acc[i] += g[i] * av[i];
                }
            }
        }
    }
}

struct GatherOp {
    x: NodeId,
    out: NodeId,
    plan: Arc<GatherPlan>,
    in_len: usize,
}

impl Op for GatherOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.x, self.in_len) {
            let block = self.plan.block;
            for (t, &s) in self.plan.src.iter().enumerate() {
                if s >= 0 {
                    let s = s as usize;
                    let chunk = &g[t * block..(t + 1) * block];
                    for (a, gi) in acc[s..s + block].iter_mut().zip(chunk) {
                        *a += gi;
                    }
                }
            }
        }
    }
}

struct ConcatColsOp {
    a: NodeId,
    b: NodeId,
    out: NodeId,
    ca: usize,
    cb: usize,
}

impl Op for ConcatColsOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let cols = self.ca + self.cb;
        let rows = g.len() / cols;
        if let Some(acc) = acc_grad(grads, needs, self.a, rows * self.ca) {
            for r in 0..rows {
                let src = &g[r * cols..r * cols + self.ca];
                for (a, gi) in acc[r * self.ca..(r + 1) * self.ca].iter_mut().zip(src) {
                    *a += gi;
                }
            }
        }
        if let Some(acc) = acc_grad(grads, needs, self.b, rows * self.cb) {
            for r in 0..rows {
                let src = &g[r * cols + self.ca..(r + 1) * cols];
                for (a, gi) in acc[r * self.cb..(r + 1) * self.cb].iter_mut().zip(src) {
                    *a += gi;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM ops
// ---------------------------------------------------------------------------

struct MatMulOp {
    a: NodeId,
    b: NodeId,
    out: NodeId,
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl Op for MatMulOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let (m, k, n) = (self.m, self.k, self.n);
        // dA' = dC * B'^T (logical m x k); dB' = A'^T * dC (logical k x n).
        if needs[self.a.0] {
            let bv = &v[self.b.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.a, m * k) {
                if !self.ta {
                    // stored A is (m, k): dA += dC (m,n) * B'^T (n,k)
                    gemm(false, !self.tb, m, n, k, 1.0, &g, &bv, 1.0, acc);
                } else {
                    // stored A is (k, m): dA_stored = (dA')^T = B' (k,n)^?? * dC^T
                    // B' is logical (k, n): stored transposed per tb.
                    gemm(self.tb, true, k, n, m, 1.0, &bv, &g, 1.0, acc);
                }
            }
        }
        if needs[self.b.0] {
            let av = &v[self.a.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.b, k * n) {
                if !self.tb {
                    // stored B is (k, n): dB += A'^T (k,m) * dC (m,n)
                    gemm(!self.ta, false, k, m, n, 1.0, &av, &g, 1.0, acc);
                } else {
                    // stored B is (n, k): dB_stored = (dB')^T = dC^T (n,m) * A' (m,k)
                    gemm(true, self.ta, n, m, k, 1.0, &g, &av, 1.0, acc);
                }
            }
        }
    }
}

struct BatchMatMulOp {
    a: NodeId,
    b: NodeId,
    out: NodeId,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl Op for BatchMatMulOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let (m, k, n) = (self.m, self.k, self.n);
        let (a_sz, b_sz, c_sz) = (m * k, k * n, m * n);
        if needs[self.a.0] {
            let bv = &v[self.b.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.a, self.batch * a_sz) {
                for i in 0..self.batch {
                    gemm(
                        false,
                        !self.tb,
                        m,
                        n,
                        k,
                        1.0,
                        &g[i * c_sz..(i + 1) * c_sz],
                        &bv[i * b_sz..(i + 1) * b_sz],
                        1.0,
                        &mut acc[i * a_sz..(i + 1) * a_sz],
                    );
                }
            }
        }
        if needs[self.b.0] {
            let av = &v[self.a.0].data;
            if let Some(acc) = acc_grad(grads, needs, self.b, self.batch * b_sz) {
                for i in 0..self.batch {
                    let (ga, gb) = (&g[i * c_sz..(i + 1) * c_sz], &av[i * a_sz..(i + 1) * a_sz]);
                    let out = &mut acc[i * b_sz..(i + 1) * b_sz];
                    if !self.tb {
                        // stored B_i (k, n): dB = A^T (k,m) * dC (m,n)
                        gemm(true, false, k, m, n, 1.0, gb, ga, 1.0, out);
                    } else {
                        // stored B_i (n, k): dB_stored = dC^T (n,m) * A (m,k)
                        gemm(true, false, n, m, k, 1.0, ga, gb, 1.0, out);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization, activations, dropout
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-5;

struct RowNormOp {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    out: NodeId,
    cols: usize,
    /// Cached per-row (mean, rstd).
    stats: Vec<(f64, f64)>,
}

impl Op for RowNormOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let c = self.cols;
        let x = &v[self.x.0].data;
        let gamma = &v[self.gamma.0].data;
        let rows = x.len() / c;

        if needs[self.gamma.0] || needs[self.beta.0] {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                let (mean, rstd) = self.stats[r];
                for j in 0..c {
                    let xhat = (x[r * c + j] - mean) * rstd;
                    dgamma[j] += g[r * c + j] * xhat;
                    dbeta[j] += g[r * c + j];
                }
            }
            if let Some(acc) = acc_grad(grads, needs, self.gamma, c) {
                for (a, d) in acc.iter_mut().zip(&dgamma) {
                    *a += d;
                }
            }
            if let Some(acc) = acc_grad(grads, needs, self.beta, c) {
                for (a, d) in acc.iter_mut().zip(&dbeta) {
                    *a += d;
                }
            }
        }
        if let Some(acc) = acc_grad(grads, needs, self.x, x.len()) {
            for r in 0..rows {
                let (mean, rstd) = self.stats[r];
                let mut sum_gg = 0.0;
                let mut sum_ggx = 0.0;
                for j in 0..c {
                    let gg = g[r * c + j] * gamma[j];
                    let xhat = (x[r * c + j] - mean) * rstd;
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                }
                let inv = 1.0 / c as f64;
                for j in 0..c {
                    let gg = g[r * c + j] * gamma[j];
                    let xhat = (x[r * c + j] - mean) * rstd;
                    acc[r * c + j] += rstd * (gg - inv * sum_gg - xhat * inv * sum_ggx);
                }
            }
        }
    }
}

struct ColNormOp {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    out: NodeId,
    cols: usize,
    /// Cached per-column (mean, rstd).
    stats: Vec<(f64, f64)>,
}

impl Op for ColNormOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let c = self.cols;
        let x = &v[self.x.0].data;
        let gamma = &v[self.gamma.0].data;
        let rows = x.len() / c;

        if needs[self.gamma.0] || needs[self.beta.0] {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                for j in 0..c {
                    let (mean, rstd) = self.stats[j];
                    let xhat = (x[r * c + j] - mean) * rstd;
                    dgamma[j] += g[r * c + j] * xhat;
                    dbeta[j] += g[r * c + j];
                }
            }
            if let Some(acc) = acc_grad(grads, needs, self.gamma, c) {
                for (a, d) in acc.iter_mut().zip(&dgamma) {
                    *a += d;
                }
            }
            if let Some(acc) = acc_grad(grads, needs, self.beta, c) {
                for (a, d) in acc.iter_mut().zip(&dbeta) {
                    *a += d;
                }
            }
        }
        if let Some(acc) = acc_grad(grads, needs, self.x, x.len()) {
            let inv = 1.0 / rows as f64;
            for j in 0..c {
                let (mean, rstd) = self.stats[j];
                let mut sum_gg = 0.0;
                let mut sum_ggx = 0.0;
                for r in 0..rows {
                    let gg = g[r * c + j] * gamma[j];
                    let xhat = (x[r * c + j] - mean) * rstd;
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                }
                for r in 0..rows {
                    let gg = g[r * c + j] * gamma[j];
                    let xhat = (x[r * c + j] - mean) * rstd;
                    acc[r * c + j] += rstd * (gg - inv * sum_gg - xhat * inv * sum_ggx);
                }
            }
        }
    }
}

struct SoftmaxRowsOp {
    out: NodeId,
    x: NodeId,
    cols: usize,
}

impl Op for SoftmaxRowsOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let y = &v[self.out.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.x, y.len()) {
            let c = self.cols;
            for r in 0..y.len() / c {
                let row = r * c;
                let dot: f64 = (0..c).map(|j| g[row + j] * y[row + j]).sum();
                for j in 0..c {
                    acc[row + j] += y[row + j] * (g[row + j] - dot);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * s * (1.0 + 3.0 * GELU_C * x * x)
}

struct GeluOp {
    x: NodeId,
    out: NodeId,
}

impl Op for GeluOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let x = &v[self.x.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.x, x.len()) {
            for i in 0..x.len() {
                acc[i] += g[i] * gelu_bwd(x[i]);
            }
        }
    }
}

struct LeakyReluOp {
    x: NodeId,
    out: NodeId,
    alpha: f64,
}

impl Op for LeakyReluOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let x = &v[self.x.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.x, x.len()) {
            for i in 0..x.len() {
                acc[i] += g[i] * if x[i] > 0.0 { 1.0 } else { self.alpha };
            }
        }
    }
}

struct SigmoidOp {
    out: NodeId,
    x: NodeId,
}

impl Op for SigmoidOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let y = &v[self.out.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.x, y.len()) {
            for i in 0..y.len() {
                acc[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
    }
}

struct DropoutOp {
    x: NodeId,
    out: NodeId,
    mask: Vec<f64>,
}

impl Op for DropoutOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.x, g.len()) {
            for i in 0..g.len() {
                acc[i] += g[i] * self.mask[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

/// Voxel-level neighbour table: for each output voxel, `k3` source voxel ids
/// (-1 = out of bounds / zero padding).
#[derive(Clone, Debug)]
pub struct ConvNeigh {
    pub ids: Vec<i64>,
    pub k3: usize,
    pub out_voxels: usize,
}

/// Build the neighbour table for a same-size conv (stride 1, pad = k/2).
pub fn conv_neigh(grid: [usize; 3], k: usize) -> ConvNeigh {
    let [d, h, w] = grid;
    let pad = (k / 2) as i64;
    let k3 = k * k * k;
    let mut ids = Vec::with_capacity(d * h * w * k3);
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dz in 0..k as i64 {
                    for dy in 0..k as i64 {
                        for dx in 0..k as i64 {
                            let (sz, sy, sx) = (z + dz - pad, y + dy - pad, x + dx - pad);
                            if sz < 0
                                || sy < 0
                                || sx < 0
                                || sz >= d as i64
                                || sy >= h as i64
                                || sx >= w as i64
                            {
                                ids.push(-1);
                            } else {
                                ids.push((sz * h as i64 + sy) * w as i64 + sx);
                            }
                        }
                    }
                }
            }
        }
    }
    ConvNeigh { ids, k3, out_voxels: d * h * w }
}

fn build_cols(x: &[f64], cin: usize, neigh: &ConvNeigh) -> Vec<f64> {
    let k3 = neigh.k3;
    let mut cols = vec![0.0; neigh.out_voxels * k3 * cin];
    for (t, &s) in neigh.ids.iter().enumerate() {
        if s >= 0 {
            let s = s as usize * cin;
            cols[t * cin..(t + 1) * cin].copy_from_slice(&x[s..s + cin]);
        }
    }
    cols
}

struct Conv3dOp {
    x: NodeId,
    w: NodeId,
    bias: Option<NodeId>,
    out: NodeId,
    neigh: Arc<ConvNeigh>,
    cin: usize,
    cout: usize,
}

impl Op for Conv3dOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let s_out = self.neigh.out_voxels;
        let kc = self.neigh.k3 * self.cin;
        // Rebuild cols rather than caching them: the im2col buffer is the
        // largest allocation in the network,'s cheaper to recompute.
        let x = &v[self.x.0].data;
        let cols = build_cols(&x, self.cin, &self.neigh);

        if needs[self.w.0] {
            if let Some(acc) = acc_grad(grads, needs, self.w, kc * self.cout) {
                // dW (kc, cout) += cols^T (kc, S) * g (S, cout)
                gemm(true, false, kc, s_out, self.cout, 1.0, &cols, &g, 1.0, acc);
            }
        }
        if let Some(b) = self.bias {
            if let Some(acc) = acc_grad(grads, needs, b, self.cout) {
                for chunk in g.chunks_exact(self.cout) {
                    for (a, gi) in acc.iter_mut().zip(chunk) {
                        *a += gi;
                    }
                }
            }
        }
        if needs[self.x.0] {
            let wv = &v[self.w.0].data;
            // dCols (S, kc) = g (S, cout) * W^T (cout, kc)
            let mut dcols = vec![0.0; s_out * kc];
            gemm(false, true, s_out, self.cout, kc, 1.0, &g, &wv, 0.0, &mut dcols);
            if let Some(acc) = acc_grad(grads, needs, self.x, x.len()) {
                for (t, &s) in self.neigh.ids.iter().enumerate() {
                    if s >= 0 {
                        let s = s as usize * self.cin;
                        let chunk = &dcols[t * self.cin..(t + 1) * self.cin];
                        for (a, gi) in acc[s..s + self.cin].iter_mut().zip(chunk) {
                            *a += gi;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Attention helpers
// ---------------------------------------------------------------------------

struct RelBiasAddOp {
    scores: NodeId,
    table: NodeId,
    out: NodeId,
    idx: Arc<Vec<u32>>,
    n_windows: usize,
    heads: usize,
    tokens: usize,
    table_len: usize,
}

impl Op for RelBiasAddOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.scores, g.len()) {
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        if let Some(acc) = acc_grad(grads, needs, self.table, self.table_len) {
            let t2 = self.tokens * self.tokens;
            for w in 0..self.n_windows {
                for h in 0..self.heads {
                    let base = (w * self.heads + h) * t2;
                    for (p, &i) in self.idx.iter().enumerate() {
                        acc[i as usize * self.heads + h] += g[base + p];
                    }
                }
            }
        }
    }
}

struct AddWindowMaskOp {
    scores: NodeId,
    out: NodeId,
}

impl Op for AddWindowMaskOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        if let Some(acc) = acc_grad(grads, needs, self.scores, g.len()) {
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

struct MeanRowsOp {
    x: NodeId,
    out: NodeId,
    cols: usize,
}

impl Op for MeanRowsOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let len = v[self.x.0].numel();
        let rows = len / self.cols;
        if let Some(acc) = acc_grad(grads, needs, self.x, len) {
            let inv = 1.0 / rows as f64;
            for r in 0..rows {
                for j in 0..self.cols {
                    acc[r * self.cols + j] += g[j] * inv;
                }
            }
        }
    }
}

struct StackRowsOp {
    inputs: Vec<NodeId>,
    out: NodeId,
    cols: usize,
}

impl Op for StackRowsOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        for (r, id) in self.inputs.iter().enumerate() {
            if let Some(acc) = acc_grad(grads, needs, *id, self.cols) {
                for (a, gi) in acc.iter_mut().zip(&g[r * self.cols..(r + 1) * self.cols]) {
                    *a += gi;
                }
            }
        }
    }
}

struct L2NormalizeRowsOp {
    x: NodeId,
    out: NodeId,
    cols: usize,
    norms: Vec<f64>,
}

impl Op for L2NormalizeRowsOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let y = &v[self.out.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.x, y.len()) {
            let c = self.cols;
            for r in 0..y.len() / c {
                let row = r * c;
                let dot: f64 = (0..c).map(|j| g[row + j] * y[row + j]).sum();
                let inv = 1.0 / self.norms[r];
                for j in 0..c {
                    acc[row + j] += (g[row + j] - y[row + j] * dot) * inv;
                }
            }
        }
    }
}

struct SoftmaxCeLossOp {
    logits: NodeId,
    out: NodeId,
    labels: Arc<Vec<u32>>,
    cols: usize,
    probs: Vec<f64>,
}

impl Op for SoftmaxCeLossOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let gs = g[0];
        let rows = self.labels.len();
        if let Some(acc) = acc_grad(grads, needs, self.logits, rows * self.cols) {
            let inv = gs / rows as f64;
            for r in 0..rows {
                for j in 0..self.cols {
                    let y = (j as u32 == self.labels[r]) as u8 as f64;
                    acc[r * self.cols + j] += inv * (self.probs[r * self.cols + j] - y);
                }
            }
        }
    }
}

const DICE_EPS: f64 = 1e-5;

struct SoftDiceLossOp {
    probs: NodeId,
    out: NodeId,
    labels: Arc<Vec<u32>>,
    cols: usize,
    /// Per-class (numerator 2*sum(p*g)+eps, denominator sum(p)+sum(g)+eps).
    sums: Vec<(f64, f64)>,
}

impl Op for SoftDiceLossOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let gs = g[0];
        let rows = self.labels.len();
        let c = self.cols;
        if let Some(acc) = acc_grad(grads, needs, self.probs, rows * c) {
            let invk = 1.0 / c as f64;
            for r in 0..rows {
                for j in 0..c {
                    let (a, b) = self.sums[j];
                    let gt = (j as u32 == self.labels[r]) as u8 as f64;
                    // d(1 - mean_c dice_c)/dp = -(1/K) * (2g*B - A)/B^2
                    acc[r * c + j] += gs * (-invk) * (2.0 * gt * b - a) / (b * b);
                }
            }
        }
    }
}

struct MaskedL1LossOp {
    pred: NodeId,
    out: NodeId,
    target: Arc<Vec<f64>>,
    mask: Arc<Vec<f64>>,
    mask_sum: f64,
}

impl Op for MaskedL1LossOp {
    fn backward(&self, v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let gs = g[0];
        let p = &v[self.pred.0].data;
        if let Some(acc) = acc_grad(grads, needs, self.pred, p.len()) {
            let inv = gs / self.mask_sum;
            for i in 0..p.len() {
                if self.mask[i] != 0.0 {
                    acc[i] += inv * (p[i] - self.target[i]).signum() * self.mask[i];
                }
            }
        }
    }
}

struct WeightedSumOp {
    x: NodeId,
    out: NodeId,
    weights: Arc<Vec<f64>>,
}

impl Op for WeightedSumOp {
    fn backward(&self, _v: &[Tensor], grads: &mut [Option<Vec<f64>>], needs: &[bool]) {
        let Some(g) = take_grad(grads, self.out) else { return };
        let gs = g[0];
        if let Some(acc) = acc_grad(grads, needs, self.x, self.weights.len()) {
            for (a, w) in acc.iter_mut().zip(self.weights.iter()) {
                *a += gs * w;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Graph op constructors (forward computation + step registration)
// ---------------------------------------------------------------------------

impl<'s> Graph<'s> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        debug_assert_eq!(av.numel(), bv.numel());
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape.clone(), data);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(t, needs, Box::new(AddOp { a, b, out: NodeId(self.values.len()) }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let cols = self.values[bias.0].numel();
        let xv = &self.values[x.0];
        debug_assert_eq!(xv.numel() % cols, 0);
        let bv = self.values[bias.0].data.clone();
        let mut data = xv.data.clone();
        for chunk in data.chunks_exact_mut(cols) {
            for (d, b) in chunk.iter_mut().zip(&bv) {
                *d += b;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0] || self.needs[bias.0];
        self.push_op(t, needs, Box::new(AddBiasOp { x, bias, out: NodeId(self.values.len()), cols }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = &self.values[x.0];
        let data: Vec<f64> = xv.data.iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(ScaleOp { x, out: NodeId(self.values.len()), c }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        debug_assert_eq!(av.numel(), bv.numel());
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape.clone(), data);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(t, needs, Box::new(MulOp { a, b, out: NodeId(self.values.len()) }))
    }

    pub fn gather(&mut self, x: NodeId, plan: Arc<GatherPlan>) -> NodeId {
        let xv = &self.values[x.0];
        let data = plan.apply(&xv.data);
        let t = Tensor::new(plan.out_shape.clone(), data);
        let needs = self.needs[x.0];
        let in_len = xv.numel();
        self.push_op(t, needs, Box::new(GatherOp { x, out: NodeId(self.values.len()), plan, in_len }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId, ca: usize, cb: usize) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let rows = av.numel() / ca;
        debug_assert_eq!(bv.numel() / cb, rows);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![rows, ca + cb], data);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(t, needs, Box::new(ConcatColsOp { a, b, out: NodeId(self.values.len()), ca, cb }))
    }

    /// `out (m, n) = A' (m, k) * B' (k, n)` with optional stored-layout
    /// transposes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool, m: usize, k: usize, n: usize) -> NodeId {
        let mut data = vec![0.0; m * n];
        gemm(ta, tb, m, k, n, 1.0, &self.values[a.0].data, &self.values[b.0].data, 0.0, &mut data);
        let t = Tensor::new(vec![m, n], data);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(t, needs, Box::new(MatMulOp { a, b, out: NodeId(self.values.len()), ta, tb, m, k, n }))
    }

    /// Batched `out_i (m, n) = A_i (m, k) * B_i' (k, n)`; only `B` may be
    /// transposed (stored `(n, k)` per batch when `tb`).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, tb: bool, batch: usize, m: usize, k: usize, n: usize) -> NodeId {
        let (a_sz, b_sz, c_sz) = (m * k, k * n, m * n);
        let av = &self.values[a.0].data;
        let bv = &self.values[b.0].data;
        debug_assert_eq!(av.len(), batch * a_sz);
        debug_assert_eq!(bv.len(), batch * b_sz);
        let mut data = vec![0.0; batch * c_sz];
        for i in 0..batch {
            gemm(
                false,
                tb,
                m,
                k,
                n,
                1.0,
                &av[i * a_sz..(i + 1) * a_sz],
                &bv[i * b_sz..(i + 1) * b_sz],
                0.0,
                &mut data[i * c_sz..(i + 1) * c_sz],
            );
        }
        let t = Tensor::new(vec![batch, m, n], data);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(t, needs, Box::new(BatchMatMulOp { a, b, out: NodeId(self.values.len()), tb, batch, m, k, n }))
    }

    /// Layer normalization over the trailing dimension.
    pub fn row_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, cols: usize) -> NodeId {
        let xv = self.values[x.0].data.clone();
        let gv = &self.values[gamma.0].data;
        let bv = &self.values[beta.0].data;
        let rows = xv.len() / cols;
        let mut stats = Vec::with_capacity(rows);
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            stats.push((mean, rstd));
            for j in 0..cols {
                data[r * cols + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
            }
        }
        let t = Tensor::new(self.values[x.0].shape.clone(), data);
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        self.push_op(t, needs, Box::new(RowNormOp { x, gamma, beta, out: NodeId(self.values.len()), cols, stats }))
    }

    /// Instance normalization: per-column statistics over all rows.
    pub fn col_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, cols: usize) -> NodeId {
        let xv = self.values[x.0].data.clone();
        let gv = &self.values[gamma.0].data;
        let bv = &self.values[beta.0].data;
        let rows = xv.len() / cols;
        let mut stats = Vec::with_capacity(cols);
        for j in 0..cols {
            let mut sum = 0.0;
            for r in 0..rows {
                sum += xv[r * cols + j];
            }
            let mean = sum / rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                let d = xv[r * cols + j] - mean;
                var += d * d;
            }
            var /= rows as f64;
            stats.push((mean, 1.0 / (var + NORM_EPS).sqrt()));
        }
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            for j in 0..cols {
                let (mean, rstd) = stats[j];
                data[r * cols + j] = gv[j] * (xv[r * cols + j] - mean) * rstd + bv[j];
            }
        }
        let t = Tensor::new(self.values[x.0].shape.clone(), data);
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        self.push_op(t, needs, Box::new(ColNormOp { x, gamma, beta, out: NodeId(self.values.len()), cols, stats }))
    }

    /// Numerically stable softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, x: NodeId, cols: usize) -> NodeId {
        let xv = &self.values[x.0];
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        let out = NodeId(self.values.len());
        self.push_op(t, needs, Box::new(SoftmaxRowsOp { out, x, cols }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let data: Vec<f64> = xv.data.iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(GeluOp { x, out: NodeId(self.values.len()) }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let xv = &self.values[x.0];
        let data: Vec<f64> = xv
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(LeakyReluOp { x, out: NodeId(self.values.len()), alpha }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let data: Vec<f64> = xv.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        let out = NodeId(self.values.len());
        self.push_op(t, needs, Box::new(SigmoidOp { out, x }))
    }

    /// Inverted dropout: keep with probability `1 - p`, scaling by
    /// `1 / (1 - p)`. Masks are drawn element-by-element in row-major order.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        debug_assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let xv = &self.values[x.0];
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data: Vec<f64> = xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape.clone(), data);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(DropoutOp { x, out: NodeId(self.values.len()), mask }))
    }

    /// Same-size 3D convolution on channel-last voxels `(S, cin)`.
    /// `w` is `(k^3 * cin, cout)`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        neigh: Arc<ConvNeigh>,
        cin: usize,
        cout: usize,
    ) -> NodeId {
        let xv = &self.values[x.0].data;
        let kc = neigh.k3 * cin;
        let cols = build_cols(xv, cin, &neigh);
        let mut data = vec![0.0; neigh.out_voxels * cout];
        gemm(false, false, neigh.out_voxels, kc, cout, 1.0, &cols, &self.values[w.0].data, 0.0, &mut data);
        if let Some(b) = bias {
            let bv = &self.values[b.0].data;
            for chunk in data.chunks_exact_mut(cout) {
                for (d, bi) in chunk.iter_mut().zip(bv) {
                    *d += bi;
                }
            }
        }
        let t = Tensor::new(vec![neigh.out_voxels, cout], data);
        let needs = self.needs[x.0]
            || self.needs[w.0]
            || bias.map(|b| self.needs[b.0]).unwrap_or(false);
        self.push_op(
            t,
            needs,
            Box::new(Conv3dOp { x, w, bias, out: NodeId(self.values.len()), neigh, cin, cout }),
        )
    }

    /// Add the per-window relative position bias to attention scores
    /// `(n_windows * heads * tokens, tokens)`. `table` is
    /// `(table_size, heads)`; `idx[i * tokens + j]` selects its row.
    pub fn rel_bias_add(
        &mut self,
        scores: NodeId,
        table: NodeId,
        idx: Arc<Vec<u32>>,
        n_windows: usize,
        heads: usize,
        tokens: usize,
    ) -> NodeId {
        let sv = &self.values[scores.0];
        let tv = &self.values[table.0].data;
        let t2 = tokens * tokens;
        let mut data = sv.data.clone();
        for w in 0..n_windows {
            for h in 0..heads {
                let base = (w * heads + h) * t2;
                for (p, &i) in idx.iter().enumerate() {
                    data[base + p] += tv[i as usize * heads + h];
                }
            }
        }
        let t = Tensor::new(sv.shape.clone(), data);
        let needs = self.needs[scores.0] || self.needs[table.0];
        let table_len = self.values[table.0].numel();
        self.push_op(
            t,
            needs,
            Box::new(RelBiasAddOp {
                scores,
                table,
                out: NodeId(self.values.len()),
                idx,
                n_windows,
                heads,
                tokens,
                table_len,
            }),
        )
    }

    /// Add a per-window additive mask `(n_windows * tokens * tokens)` to
    /// scores `(n_windows * heads * tokens, tokens)`, broadcast over heads.
    pub fn add_window_mask(
        &mut self,
        scores: NodeId,
        mask: Arc<Vec<f64>>,
        n_windows: usize,
        heads: usize,
        tokens: usize,
    ) -> NodeId {
        let sv = &self.values[scores.0];
        let t2 = tokens * tokens;
        debug_assert_eq!(mask.len(), n_windows * t2);
        let mut data = sv.data.clone();
        for w in 0..n_windows {
            for h in 0..heads {
                let base = (w * heads + h) * t2;
                for p in 0..t2 {
                    data[base + p] += mask[w * t2 + p];
                }
            }
        }
        let t = Tensor::new(sv.shape.clone(), data);
        let needs = self.needs[scores.0];
        self.push_op(t, needs, Box::new(AddWindowMaskOp { scores, out: NodeId(self.values.len()) }))
    }

    pub fn mean_rows(&mut self, x: NodeId, cols: usize) -> NodeId {
        let xv = &self.values[x.0].data;
        let rows = xv.len() / cols;
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                data[j] += xv[r * cols + j];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let t = Tensor::new(vec![1, cols], data);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(MeanRowsOp { x, out: NodeId(self.values.len()), cols }))
    }

    /// Stack `(1, cols)` rows into `(len, cols)`.
    pub fn stack_rows(&mut self, inputs: &[NodeId], cols: usize) -> NodeId {
        let mut data = Vec::with_capacity(inputs.len() * cols);
        for id in inputs {
            debug_assert_eq!(self.values[id.0].numel(), cols);
            data.extend_from_slice(&self.values[id.0].data);
        }
        let t = Tensor::new(vec![inputs.len(), cols], data);
        let needs = inputs.iter().any(|id| self.needs[id.0]);
        self.push_op(
            t,
            needs,
            Box::new(StackRowsOp { inputs: inputs.to_vec(), out: NodeId(self.values.len()), cols }),
        )
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, cols: usize) -> NodeId {
        let xv = &self.values[x.0].data;
        let rows = xv.len() / cols;
        let mut norms = Vec::with_capacity(rows);
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            for j in 0..cols {
                data[r * cols + j] = row[j] / norm;
            }
        }
        let t = Tensor::new(self.values[x.0].shape.clone(), data);
        let needs = self.needs[x.0];
        let out = NodeId(self.values.len());
        self.push_op(t, needs, Box::new(L2NormalizeRowsOp { x, out, cols, norms }))
    }

    /// Mean softmax cross-entropy over rows with integer targets.
    pub fn softmax_ce_loss(&mut self, logits: NodeId, labels: Arc<Vec<u32>>, cols: usize) -> NodeId {
        let xv = &self.values[logits.0].data;
        let rows = labels.len();
        debug_assert_eq!(xv.len(), rows * cols);
        let mut probs = vec![0.0; xv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                probs[r * cols + j] /= sum;
            }
            loss -= (probs[r * cols + labels[r] as usize]).ln();
        }
        loss /= rows as f64;
        let t = Tensor::scalar(loss);
        let needs = self.needs[logits.0];
        self.push_op(
            t,
            needs,
            Box::new(SoftmaxCeLossOp { logits, out: NodeId(self.values.len()), labels, cols, probs }),
        )
    }

    /// `1 - mean_c (2 sum(p_c g_c) + eps) / (sum p_c + sum g_c + eps)` over
    /// all `cols` channels, with one-hot targets from integer labels.
    pub fn soft_dice_loss(&mut self, probs: NodeId, labels: Arc<Vec<u32>>, cols: usize) -> NodeId {
        let pv = &self.values[probs.0].data;
        let rows = labels.len();
        debug_assert_eq!(pv.len(), rows * cols);
        let mut sums = vec![(0.0f64, 0.0f64); cols];
        for j in 0..cols {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for r in 0..rows {
                let p = pv[r * cols + j];
                psum += p;
                if labels[r] as usize == j {
                    inter += p;
                    gsum += 1.0;
                }
            }
            sums[j] = (2.0 * inter + DICE_EPS, psum + gsum + DICE_EPS);
        }
        let mean_dice: f64 = sums.iter().map(|(a, b)| a / b).sum::<f64>() / cols as f64;
        let t = Tensor::scalar(1.0 - mean_dice);
        let needs = self.needs[probs.0];
        self.push_op(
            t,
            needs,
            Box::new(SoftDiceLossOp { probs, out: NodeId(self.values.len()), labels, cols, sums }),
        )
    }

    /// Mean L1 between `pred` and `target` restricted to `mask != 0` voxels.
    pub fn masked_l1_loss(&mut self, pred: NodeId, target: Arc<Vec<f64>>, mask: Arc<Vec<f64>>) -> NodeId {
        let pv = &self.values[pred.0].data;
        debug_assert_eq!(pv.len(), target.len());
        debug_assert_eq!(pv.len(), mask.len());
        let mask_sum: f64 = mask.iter().sum::<f64>().max(1.0);
        let mut loss = 0.0;
        for i in 0..pv.len() {
            loss += (pv[i] - target[i]).abs() * mask[i];
        }
        loss /= mask_sum;
        let t = Tensor::scalar(loss);
        let needs = self.needs[pred.0];
        self.push_op(
            t,
            needs,
            Box::new(MaskedL1LossOp { pred, out: NodeId(self.values.len()), target, mask, mask_sum }),
        )
    }

    /// Scalar dot product with fixed weights (test harness and diagnostics).
    pub fn weighted_sum(&mut self, x: NodeId, weights: Arc<Vec<f64>>) -> NodeId {
        let xv = &self.values[x.0].data;
        debug_assert_eq!(xv.len(), weights.len());
        let loss: f64 = xv.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        let t = Tensor::scalar(loss);
        let needs = self.needs[x.0];
        self.push_op(t, needs, Box::new(WeightedSumOp { x, out: NodeId(self.values.len()), weights }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GradStore, ParamKind, ParamStore};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Check every input gradient of `build` against central differences.
    fn fd_check<F>(name: &str, inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut store = ParamStore::new();
        for (i, t) in inputs.iter().enumerate() {
            let idx = store.add(&format!("p{i}"), ParamKind::Weight, t.shape.clone());
            store.get_mut(idx).value = t.clone();
        }
        let mut weights_rng = ChaCha8Rng::seed_from_u64(12345);

        let run = |store: &ParamStore, weights: &Arc<Vec<f64>>, want_grads: bool| -> (f64, Option<GradStore>) {
            let mut g = Graph::new(store);
            let ids: Vec<NodeId> = (0..inputs.len()).map(|i| g.param(i)).collect();
            let out = build(&mut g, &ids);
            let loss = if g.value(out).numel() == 1 {
                out
            } else {
                g.weighted_sum(out, weights.clone())
            };
            let value = g.value(loss).data[0];
            if want_grads {
                let mut gs = GradStore::zeros_like(store);
                g.backward(loss, &mut gs);
                (value, Some(gs))
            } else {
                (value, None)
            }
        };

        // Fix the probe weights once, based on the output size of a dry run.
        let probe = {
            let mut g = Graph::new(&store);
            let ids: Vec<NodeId> = (0..inputs.len()).map(|i| g.param(i)).collect();
            let out = build(&mut g, &ids);
            g.value(out).numel()
        };
        let weights: Arc<Vec<f64>> =
            Arc::new((0..probe).map(|_| weights_rng.gen_range(-1.0..1.0)).collect());

        let (_, grads) = run(&store, &weights, true);
        let grads = grads.unwrap();

        let h = 1e-6;
        for (pi, t) in inputs.iter().enumerate() {
            for e in 0..t.numel() {
                let orig = store.get(pi).value.data[e];
                let mut s2 = store.clone();
                s2.get_mut(pi).value.data[e] = orig + h;
                let (fp, _) = run(&s2, &weights, false);
                s2.get_mut(pi).value.data[e] = orig - h;
                let (fm, _) = run(&s2, &weights, false);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(pi)[e];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "{name}: input {pi} elem {e}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn fd_add_scale_mul_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let bias = rand_tensor(&mut rng, vec![4]);
        fd_check("add", &[a.clone(), b.clone()], |g, ids| g.add(ids[0], ids[1]));
        fd_check("scale", &[a.clone()], |g, ids| g.scale(ids[0], -1.7));
        fd_check("mul", &[a.clone(), b], |g, ids| g.mul(ids[0], ids[1]));
        fd_check("add_bias", &[a, bias], |g, ids| g.add_bias(ids[0], ids[1]));
    }

    #[test]
    fn fd_matmul_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (3, 4, 2);
        for ta in [false, true] {
            for tb in [false, true] {
                let a = rand_tensor(&mut rng, if ta { vec![k, m] } else { vec![m, k] });
                let b = rand_tensor(&mut rng, if tb { vec![n, k] } else { vec![k, n] });
                fd_check(&format!("matmul ta={ta} tb={tb}"), &[a, b], |g, ids| {
                    g.matmul(ids[0], ids[1], ta, tb, m, k, n)
                });
            }
        }
    }

    #[test]
    fn fd_bmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, m, k, n) = (2, 3, 2, 4);
        for tb in [false, true] {
            let a = rand_tensor(&mut rng, vec![batch, m, k]);
            let b = rand_tensor(&mut rng, if tb { vec![batch, n, k] } else { vec![batch, k, n] });
            fd_check(&format!("bmm tb={tb}"), &[a, b], |g, ids| {
                g.bmm(ids[0], ids[1], tb, batch, m, k, n)
            });
        }
    }

    #[test]
    fn fd_gather_with_duplicates_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let plan = Arc::new(GatherPlan {
            src: vec![0, 3, 3, -1, 9, 6],
            block: 3,
            out_shape: vec![6, 3],
        });
        fd_check("gather", &[x], |g, ids| g.gather(ids[0], plan.clone()));
    }

    #[test]
    fn fd_concat_cols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, vec![3, 2]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        fd_check("concat_cols", &[a, b], |g, ids| g.concat_cols(ids[0], ids[1], 2, 4));
    }

    #[test]
    fn fd_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![5, 4]);
        let gamma = rand_tensor(&mut rng, vec![4]);
        let beta = rand_tensor(&mut rng, vec![4]);
        fd_check("row_norm", &[x.clone(), gamma.clone(), beta.clone()], |g, ids| {
            g.row_norm(ids[0], ids[1], ids[2], 4)
        });
        fd_check("col_norm", &[x, gamma, beta], |g, ids| {
            g.col_norm(ids[0], ids[1], ids[2], 4)
        });
    }

    #[test]
    fn fd_activations_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![4, 5]);
        fd_check("softmax_rows", &[x.clone()], |g, ids| g.softmax_rows(ids[0], 5));
        fd_check("gelu", &[x.clone()], |g, ids| g.gelu(ids[0]));
        fd_check("leaky_relu", &[x.clone()], |g, ids| g.leaky_relu(ids[0], 0.01));
        fd_check("sigmoid", &[x], |g, ids| g.sigmoid(ids[0]));
    }

    #[test]
    fn fd_dropout_with_fixed_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, vec![6, 3]);
        fd_check("dropout", &[x], |g, ids| {
            let mut drng = ChaCha8Rng::seed_from_u64(42);
            g.dropout(ids[0], 0.5, &mut drng)
        });
    }

    #[test]
    fn fd_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = [3, 3, 3];
        let (cin, cout, k) = (2, 3, 3);
        let x = rand_tensor(&mut rng, vec![27, cin]);
        let w = rand_tensor(&mut rng, vec![k * k * k * cin, cout]);
        let b = rand_tensor(&mut rng, vec![cout]);
        let neigh = Arc::new(conv_neigh(grid, k));
        fd_check("conv3d", &[x, w, b], |g, ids| {
            g.conv3d(ids[0], ids[1], Some(ids[2]), neigh.clone(), cin, cout)
        });
    }

    #[test]
    fn fd_rel_bias_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n_windows, heads, tokens) = (2, 2, 3);
        let scores = rand_tensor(&mut rng, vec![n_windows * heads * tokens, tokens]);
        let table = rand_tensor(&mut rng, vec![5, heads]);
        let idx: Arc<Vec<u32>> = Arc::new(vec![0, 1, 2, 1, 4, 3, 2, 0, 1]);
        let mask: Arc<Vec<f64>> = Arc::new(
            (0..n_windows * tokens * tokens)
                .map(|i| if i % 4 == 0 { -1e9 } else { 0.0 })
                .collect(),
        );
        fd_check("rel_bias_add", &[scores.clone(), table], |g, ids| {
            g.rel_bias_add(ids[0], ids[1], idx.clone(), n_windows, heads, tokens)
        });
        fd_check("add_window_mask", &[scores], |g, ids| {
            let masked = g.add_window_mask(ids[0], mask.clone(), n_windows, heads, tokens);
            g.softmax_rows(masked, tokens)
        });
    }

    #[test]
    fn fd_reductions_and_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        fd_check("mean_rows", &[x.clone()], |g, ids| g.mean_rows(ids[0], 3));
        let a = rand_tensor(&mut rng, vec![1, 3]);
        let b = rand_tensor(&mut rng, vec![1, 3]);
        fd_check("stack_rows", &[a, b], |g, ids| g.stack_rows(&[ids[0], ids[1]], 3));
        fd_check("l2_normalize", &[x], |g, ids| g.l2_normalize_rows(ids[0], 3));
    }

    #[test]
    fn fd_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = rand_tensor(&mut rng, vec![5, 6]);
        let labels: Arc<Vec<u32>> = Arc::new(vec![0, 5, 2, 2, 4]);
        fd_check("softmax_ce", &[logits.clone()], |g, ids| {
            g.softmax_ce_loss(ids[0], labels.clone(), 6)
        });
        // Dice needs probabilities in (0, 1): squash через sigmoid first.
        fd_check("soft_dice", &[logits.clone()], |g, ids| {
            let p = g.sigmoid(ids[0]);
            g.soft_dice_loss(p, labels.clone(), 6)
        });
        let pred = rand_tensor(&mut rng, vec![8]);
        // Keep |pred - target| away from the L1 kink.
        let target: Arc<Vec<f64>> = Arc::new((0..8).map(|i| 3.0 + i as f64).collect());
        let mask: Arc<Vec<f64>> = Arc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        fd_check("masked_l1", &[pred], |g, ids| {
            g.masked_l1_loss(ids[0], target.clone(), mask.clone())
        });
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_k() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(vec![7, 4]));
        let labels: Arc<Vec<u32>> = Arc::new(vec![0, 1, 2, 3, 0, 1, 2]);
        let loss = g.softmax_ce_loss(logits, labels, 4);
        assert!((g.value(loss).data[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_ignores_unmasked_voxels() {
        let store = ParamStore::new();
        let target: Arc<Vec<f64>> = Arc::new(vec![0.0; 4]);
        let mask: Arc<Vec<f64>> = Arc::new(vec![1.0, 0.0, 1.0, 0.0]);
        let losses: Vec<f64> = [0.0, 100.0]
            .iter()
            .map(|&junk| {
                let mut g = Graph::new(&store);
                let pred = g.input(Tensor::new(vec![4], vec![1.0, junk, 2.0, junk]));
                let l = g.masked_l1_loss(pred, target.clone(), mask.clone());
                g.value(l).data[0]
            })
            .collect();
        assert_eq!(losses[0], losses[1]);
        assert!((losses[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gather_plan_apply_and_reverse() {
        let plan = GatherPlan { src: vec![2, 0, -1], block: 2, out_shape: vec![3, 2] };
        let out = plan.apply(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out, vec![3.0, 4.0, 1.0, 2.0, 0.0, 0.0]);
    }
}
