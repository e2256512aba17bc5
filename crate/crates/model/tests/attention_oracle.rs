//! Attention correctness against an independent dense oracle, and the
//! shifted-window masking contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg_model::attention::{AttnMode, WindowAttention};
use volseg_model::graph::Graph;
use volseg_model::params::ParamStore;
use volseg_model::tensor::Tensor;

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in &mut p.value.data {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Dense multi-head attention with relative position bias, computed from
/// first principles on plain vectors.
#[allow(clippy::needless_range_loop)]
fn dense_attention_oracle(
    x: &[f64],
    tokens: usize,
    dim: usize,
    heads: usize,
    window: [usize; 3],
    qkv_w: &[f64],
    qkv_b: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
    table: &[f64],
) -> Vec<f64> {
    let dh = dim / heads;
    // qkv: (tokens, 3*dim)
    let mut qkv = vec![0.0; tokens * 3 * dim];
    for t in 0..tokens {
        for o in 0..3 * dim {
            let mut acc = qkv_b[o];
            for i in 0..dim {
                acc += x[t * dim + i] * qkv_w[i * 3 * dim + o];
            }
            qkv[t * 3 * dim + o] = acc;
        }
    }
    // Token coordinates in z-major order.
    let mut coords = Vec::with_capacity(tokens);
    for z in 0..window[0] {
        for y in 0..window[1] {
            for x2 in 0..window[2] {
                coords.push([z as i64, y as i64, x2 as i64]);
            }
        }
    }
    let bias_at = |i: usize, j: usize, h: usize| -> f64 {
        let dz = coords[i][0] - coords[j][0] + window[0] as i64 - 1;
        let dy = coords[i][1] - coords[j][1] + window[1] as i64 - 1;
        let dx = coords[i][2] - coords[j][2] + window[2] as i64 - 1;
        let idx = (dz * (2 * window[1] as i64 - 1) + dy) * (2 * window[2] as i64 - 1) + dx;
        table[idx as usize * heads + h]
    };
    let mut ctx = vec![0.0; tokens * dim];
    for h in 0..heads {
        for i in 0..tokens {
            // scores over j
            let mut scores = vec![0.0; tokens];
            for j in 0..tokens {
                let mut dot = 0.0;
                for d in 0..dh {
                    let q = qkv[i * 3 * dim + h * dh + d];
                    let k = qkv[j * 3 * dim + dim + h * dh + d];
                    dot += q * k;
                }
                scores[j] = dot / (dh as f64).sqrt() + bias_at(i, j, h);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for e in &mut exps {
                *e /= sum;
            }
            for d in 0..dh {
                let mut acc = 0.0;
                for j in 0..tokens {
                    acc += exps[j] * qkv[j * 3 * dim + 2 * dim + h * dh + d];
                }
                ctx[i * dim + h * dh + d] = acc;
            }
        }
    }
    // Output projection.
    let mut out = vec![0.0; tokens * dim];
    for t in 0..tokens {
        for o in 0..dim {
            let mut acc = proj_b[o];
            for i in 0..dim {
                acc += ctx[t * dim + i] * proj_w[i * dim + o];
            }
            out[t * dim + o] = acc;
        }
    }
    out
}

#[test]
fn single_window_attention_matches_dense_oracle() {
    // 4x4x4 grid with window 4: a single window of 64 tokens.
    let (dim, heads) = (8, 2);
    let grid = [4usize, 4, 4];
    let window = [4usize, 4, 4];
    let tokens = 64;

    let mut store = ParamStore::new();
    let attn = WindowAttention::build(&mut store, "t", dim, heads, window);
    randomize(&mut store, 7);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..tokens * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new(&store);
    let input = g.input(Tensor::new(vec![tokens, dim], x.clone()));
    let out = attn.forward(&mut g, input, grid, AttnMode::Window).unwrap();
    let got = &g.value(out.out).data;

    let name = |s: &str| store.index_of(s).unwrap();
    let expected = dense_attention_oracle(
        &x,
        tokens,
        dim,
        heads,
        window,
        &store.get(name("t.qkv.weight")).value.data,
        &store.get(name("t.qkv.bias")).value.data,
        &store.get(name("t.proj.weight")).value.data,
        &store.get(name("t.proj.bias")).value.data,
        &store.get(name("t.rel_bias.table")).value.data,
    );
    assert_eq!(got.len(), expected.len());
    for (i, (a, b)) in got.iter().zip(&expected).enumerate() {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        assert!(rel < 1e-5, "token elem {i}: {a} vs oracle {b} (rel {rel})");
    }
}

#[test]
fn shifted_attention_masks_cross_window_pairs() {
    // 8x8x8 grid, window 4, shift 2: probabilities across pre-shift window
    // boundaries must vanish.
    let (dim, heads) = (4, 2);
    let grid = [8usize, 8, 8];
    let window = [4usize, 4, 4];
    let shift = [2usize, 2, 2];

    let mut store = ParamStore::new();
    let attn = WindowAttention::build(&mut store, "t", dim, heads, window);
    randomize(&mut store, 11);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s: usize = grid.iter().product();
    let x: Vec<f64> = (0..s * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new(&store);
    let input = g.input(Tensor::new(vec![s, dim], x));
    let out = attn.forward(&mut g, input, grid, AttnMode::ShiftedWindow).unwrap();
    let probs = &g.value(out.probs).data;
    let (n_w, t) = (out.n_windows, out.tokens);
    assert_eq!(n_w, 8);
    assert_eq!(t, 64);

    // Independent recomputation of pre-shift window ids per slot.
    let counts = [2usize, 2, 2];
    let slot_pos = |w: usize, ti: usize| -> [usize; 3] {
        let wz = w / (counts[1] * counts[2]);
        let wy = (w / counts[2]) % counts[1];
        let wx = w % counts[2];
        let tz = ti / (window[1] * window[2]);
        let ty = (ti / window[2]) % window[1];
        let tx = ti % window[2];
        [wz * window[0] + tz, wy * window[1] + ty, wx * window[2] + tx]
    };
    let orig_window = |p: [usize; 3]| -> [usize; 3] {
        [
            ((p[0] + shift[0]) % grid[0]) / window[0],
            ((p[1] + shift[1]) % grid[1]) / window[1],
            ((p[2] + shift[2]) % grid[2]) / window[2],
        ]
    };
    let mut masked_pairs = 0usize;
    for w in 0..n_w {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    if i == j {
                        continue;
                    }
                    if orig_window(slot_pos(w, i)) != orig_window(slot_pos(w, j)) {
                        let p = probs[((w * heads + h) * t + i) * t + j];
                        assert!(p < 1e-6, "w={w} h={h} i={i} j={j}: prob {p}");
                        masked_pairs += 1;
                    }
                }
            }
        }
    }
    assert!(masked_pairs > 0, "the fixture produced no cross-window pairs");

    // Rows still sum to one.
    for row in probs.chunks_exact(t) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_shift_shifted_path_equals_window_path() {
    // Grid equal to the window: the shifted branch degenerates to W-MSA.
    let (dim, heads) = (6, 3);
    let grid = [4usize, 4, 4];
    let window = [4usize, 4, 4];
    let mut store = ParamStore::new();
    let attn = WindowAttention::build(&mut store, "t", dim, heads, window);
    randomize(&mut store, 13);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = 64;
    let x: Vec<f64> = (0..s * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let run = |mode: AttnMode| -> Vec<f64> {
        let mut g = Graph::new(&store);
        let input = g.input(Tensor::new(vec![s, dim], x.clone()));
        let out = attn.forward(&mut g, input, grid, mode).unwrap();
        g.value(out.out).data.clone()
    };
    assert_eq!(run(AttnMode::Window), run(AttnMode::ShiftedWindow));
}
