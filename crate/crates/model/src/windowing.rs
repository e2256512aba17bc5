//! Spatial layout plans: patch partition, window partition/reverse, cyclic
//! shifts, patch-merging rearrangement and transposed-conv expansion.
//!
//! Token and voxel tensors are channel-last `(S, C)` with S enumerating the
//! grid z-major. Every rearrangement is a [`GatherPlan`] of contiguous
//! channel blocks, so the same plan drives both the plain-data helpers here
//! and the autodiff gather op.

use std::sync::Arc;

use crate::graph::GatherPlan;
use crate::tensor::Tensor;

#[inline]
fn vox(grid: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * grid[1] + y) * grid[2] + x
}

/// Non-overlapping patch extraction: `(S, cin)` on `grid` to
/// `(S / prod(patch), prod(patch) * cin)`.
pub fn patchify_plan(grid: [usize; 3], patch: [usize; 3], cin: usize) -> GatherPlan {
    let out_grid = [grid[0] / patch[0], grid[1] / patch[1], grid[2] / patch[2]];
    let chunks = out_grid.iter().product::<usize>() * patch.iter().product::<usize>();
    let mut src = Vec::with_capacity(chunks);
    for z in 0..out_grid[0] {
        for y in 0..out_grid[1] {
            for x in 0..out_grid[2] {
                for dz in 0..patch[0] {
                    for dy in 0..patch[1] {
                        for dx in 0..patch[2] {
                            let v = vox(grid, z * patch[0] + dz, y * patch[1] + dy, x * patch[2] + dx);
                            src.push((v * cin) as i64);
                        }
                    }
                }
            }
        }
    }
    GatherPlan {
        src,
        block: cin,
        out_shape: vec![out_grid.iter().product(), patch.iter().product::<usize>() * cin],
    }
}

/// 2x2x2 patch merging rearrangement: `(S, c)` to `(S/8, 8c)`.
pub fn merge_plan(grid: [usize; 3], c: usize) -> GatherPlan {
    debug_assert!(grid.iter().all(|&g| g % 2 == 0));
    let out_grid = [grid[0] / 2, grid[1] / 2, grid[2] / 2];
    let mut src = Vec::with_capacity(out_grid.iter().product::<usize>() * 8);
    for z in 0..out_grid[0] {
        for y in 0..out_grid[1] {
            for x in 0..out_grid[2] {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            src.push((vox(grid, 2 * z + dz, 2 * y + dy, 2 * x + dx) * c) as i64);
                        }
                    }
                }
            }
        }
    }
    GatherPlan { src, block: c, out_shape: vec![out_grid.iter().product(), 8 * c] }
}

/// Cyclic roll: output token at `p` takes the input token at
/// `(p + offset) mod grid` per axis.
pub fn roll_plan(grid: [usize; 3], offset: [i64; 3], c: usize) -> GatherPlan {
    let mut src = Vec::with_capacity(grid.iter().product());
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let sz = (z as i64 + offset[0]).rem_euclid(grid[0] as i64) as usize;
                let sy = (y as i64 + offset[1]).rem_euclid(grid[1] as i64) as usize;
                let sx = (x as i64 + offset[2]).rem_euclid(grid[2] as i64) as usize;
                src.push((vox(grid, sz, sy, sx) * c) as i64);
            }
        }
    }
    GatherPlan { src, block: c, out_shape: vec![grid.iter().product(), c] }
}

/// Window partition geometry for one token grid.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    /// Grid padded up to a window multiple per axis.
    pub padded: [usize; 3],
    pub n_windows: usize,
    /// Tokens per window.
    pub tokens: usize,
    /// `(S, c)` -> `(n_windows * tokens, c)`, zero-filling padding.
    pub partition: Arc<GatherPlan>,
    /// `(n_windows * tokens, c)` -> `(S, c)`, dropping padding.
    pub reverse: Arc<GatherPlan>,
    /// Per window token: true where the slot is padding.
    pub pad_mask: Vec<bool>,
}

/// Build the partition/reverse plans for `grid` and `window` (channel width
/// `c`). Windows enumerate z-major, tokens within a window z-major.
pub fn window_plan(grid: [usize; 3], window: [usize; 3], c: usize) -> WindowPlan {
    let window = [
        window[0].min(grid[0]),
        window[1].min(grid[1]),
        window[2].min(grid[2]),
    ];
    let counts = [
        grid[0].div_ceil(window[0]),
        grid[1].div_ceil(window[1]),
        grid[2].div_ceil(window[2]),
    ];
    let padded = [
        counts[0] * window[0],
        counts[1] * window[1],
        counts[2] * window[2],
    ];
    let n_windows = counts.iter().product();
    let tokens = window.iter().product();

    let mut src = Vec::with_capacity(n_windows * tokens);
    let mut pad_mask = Vec::with_capacity(n_windows * tokens);
    for wz in 0..counts[0] {
        for wy in 0..counts[1] {
            for wx in 0..counts[2] {
                for tz in 0..window[0] {
                    for ty in 0..window[1] {
                        for tx in 0..window[2] {
                            let z = wz * window[0] + tz;
                            let y = wy * window[1] + ty;
                            let x = wx * window[2] + tx;
                            if z < grid[0] && y < grid[1] && x < grid[2] {
                                src.push((vox(grid, z, y, x) * c) as i64);
                                pad_mask.push(false);
                            } else {
                                src.push(-1);
                                pad_mask.push(true);
                            }
                        }
                    }
                }
            }
        }
    }
    let partition = Arc::new(GatherPlan {
        src,
        block: c,
        out_shape: vec![n_windows * tokens, c],
    });

    // Reverse: for each original token, the window row holding it.
    let mut rsrc = Vec::with_capacity(grid.iter().product());
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let (wz, tz) = (z / window[0], z % window[0]);
                let (wy, ty) = (y / window[1], y % window[1]);
                let (wx, tx) = (x / window[2], x % window[2]);
                let wi = (wz * counts[1] + wy) * counts[2] + wx;
                let ti = (tz * window[1] + ty) * window[2] + tx;
                rsrc.push(((wi * tokens + ti) * c) as i64);
            }
        }
    }
    let reverse = Arc::new(GatherPlan {
        src: rsrc,
        block: c,
        out_shape: vec![grid.iter().product(), c],
    });

    WindowPlan { grid, window, padded, n_windows, tokens, partition, reverse, pad_mask }
}

/// Partition a plain `(S, c)` token tensor into `(n_windows * tokens, c)`.
pub fn window_partition(tokens: &Tensor, grid: [usize; 3], window: [usize; 3]) -> (Tensor, WindowPlan) {
    let c = tokens.shape[tokens.shape.len() - 1];
    let plan = window_plan(grid, window, c);
    let data = plan.partition.apply(&tokens.data);
    (Tensor::new(plan.partition.out_shape.clone(), data), plan)
}

/// Undo [`window_partition`], dropping padded slots.
pub fn window_reverse(windows: &Tensor, plan: &WindowPlan) -> Tensor {
    let data = plan.reverse.apply(&windows.data);
    Tensor::new(plan.reverse.out_shape.clone(), data)
}

/// Attention mask for one windowed-attention layout.
///
/// Tokens carry the id of the window that contained them before the cyclic
/// shift; attention is forbidden between tokens with different ids (padding
/// slots get unique ids so they only attend themselves). Returns `None` when
/// nothing needs masking (no shift, no padding).
pub fn attention_mask(plan: &WindowPlan, shift: [usize; 3]) -> Option<Arc<Vec<f64>>> {
    let has_pad = plan.pad_mask.iter().any(|&p| p);
    let has_shift = shift.iter().any(|&s| s > 0);
    if !has_pad && !has_shift {
        return None;
    }
    let grid = plan.grid;
    let window = plan.window;
    let counts = [
        plan.padded[0] / window[0],
        plan.padded[1] / window[1],
        plan.padded[2] / window[2],
    ];
    // Region id per window slot: the pre-shift window id for real tokens,
    // unique negatives for padding.
    let mut rid = vec![0i64; plan.n_windows * plan.tokens];
    let mut slot = 0;
    let orig_counts = [
        grid[0].div_ceil(window[0]),
        grid[1].div_ceil(window[1]),
        grid[2].div_ceil(window[2]),
    ];
    for wz in 0..counts[0] {
        for wy in 0..counts[1] {
            for wx in 0..counts[2] {
                for tz in 0..window[0] {
                    for ty in 0..window[1] {
                        for tx in 0..window[2] {
                            let z = wz * window[0] + tz;
                            let y = wy * window[1] + ty;
                            let x = wx * window[2] + tx;
                            rid[slot] = if z < grid[0] && y < grid[1] && x < grid[2] {
                                // Position before the shift.
                                let pz = (z + shift[0]) % grid[0];
                                let py = (y + shift[1]) % grid[1];
                                let px = (x + shift[2]) % grid[2];
                                ((pz / window[0]) * orig_counts[1] * orig_counts[2]
                                    + (py / window[1]) * orig_counts[2]
                                    + px / window[2]) as i64
                            } else {
                                -1 - slot as i64
                            };
                            slot += 1;
                        }
                    }
                }
            }
        }
    }
    let t = plan.tokens;
    let mut mask = vec![0.0f64; plan.n_windows * t * t];
    for w in 0..plan.n_windows {
        for i in 0..t {
            for j in 0..t {
                if i != j && rid[w * t + i] != rid[w * t + j] {
                    mask[(w * t + i) * t + j] = -1e9;
                }
            }
        }
    }
    Some(Arc::new(mask))
}

/// Split one third of a packed qkv tensor `(nW*T, 3C)` into head-major
/// batches `(nW * heads, T, dh)`. `part` is 0 for Q, 1 for K, 2 for V.
pub fn qkv_head_plan(n_windows: usize, tokens: usize, heads: usize, dh: usize, part: usize) -> GatherPlan {
    let c = heads * dh;
    let mut src = Vec::with_capacity(n_windows * heads * tokens);
    for w in 0..n_windows {
        for h in 0..heads {
            for t in 0..tokens {
                src.push(((w * tokens + t) * 3 * c + part * c + h * dh) as i64);
            }
        }
    }
    GatherPlan { src, block: dh, out_shape: vec![n_windows * heads, tokens, dh] }
}

/// Merge head-major context `(nW * heads, T, dh)` back to `(nW*T, C)`.
pub fn head_merge_plan(n_windows: usize, tokens: usize, heads: usize, dh: usize) -> GatherPlan {
    let mut src = Vec::with_capacity(n_windows * tokens * heads);
    for w in 0..n_windows {
        for t in 0..tokens {
            for h in 0..heads {
                src.push((((w * heads + h) * tokens + t) * dh) as i64);
            }
        }
    }
    GatherPlan { src, block: dh, out_shape: vec![n_windows * tokens, heads * dh] }
}

/// Relative-position index: for each token pair `(i, j)` in a window, the
/// row of the bias table, sized `prod(2w - 1)`.
pub fn rel_pos_index(window: [usize; 3]) -> Arc<Vec<u32>> {
    let t = window.iter().product::<usize>();
    let mut coords = Vec::with_capacity(t);
    for z in 0..window[0] {
        for y in 0..window[1] {
            for x in 0..window[2] {
                coords.push([z as i64, y as i64, x as i64]);
            }
        }
    }
    let (ry, rx) = ((2 * window[1] - 1) as i64, (2 * window[2] - 1) as i64);
    let mut idx = Vec::with_capacity(t * t);
    for i in &coords {
        for j in &coords {
            let dz = i[0] - j[0] + window[0] as i64 - 1;
            let dy = i[1] - j[1] + window[1] as i64 - 1;
            let dx = i[2] - j[2] + window[2] as i64 - 1;
            idx.push(((dz * ry + dy) * rx + dx) as u32);
        }
    }
    Arc::new(idx)
}

/// Table row count for [`rel_pos_index`].
pub fn rel_pos_table_size(window: [usize; 3]) -> usize {
    (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
}

/// Transposed-conv (kernel 2, stride 2) expansion: given per-voxel outputs
/// `(S_in, 8 * cout)`, spread them onto the doubled grid `(8 * S_in, cout)`.
pub fn transp_expand_plan(grid_in: [usize; 3], cout: usize) -> GatherPlan {
    let out_grid = [2 * grid_in[0], 2 * grid_in[1], 2 * grid_in[2]];
    let mut src = Vec::with_capacity(out_grid.iter().product());
    for z in 0..out_grid[0] {
        for y in 0..out_grid[1] {
            for x in 0..out_grid[2] {
                let v = vox(grid_in, z / 2, y / 2, x / 2);
                let tap = ((z % 2) * 2 + (y % 2)) * 2 + (x % 2);
                src.push(((v * 8 + tap) * cout) as i64);
            }
        }
    }
    GatherPlan { src, block: cout, out_shape: vec![out_grid.iter().product(), cout] }
}

/// Channel-last `(S, c)` to channel-first `(c, S)` flattening.
pub fn channel_first_plan(s: usize, c: usize) -> GatherPlan {
    let mut src = Vec::with_capacity(s * c);
    for ch in 0..c {
        for v in 0..s {
            src.push((v * c + ch) as i64);
        }
    }
    GatherPlan { src, block: 1, out_shape: vec![c, s] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(rng: &mut ChaCha8Rng, s: usize, c: usize) -> Tensor {
        Tensor::new(vec![s, c], (0..s * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn partition_4x4x4_window_2_gives_8_windows_of_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tokens(&mut rng, 64, 3);
        let (w, plan) = window_partition(&x, [4, 4, 4], [2, 2, 2]);
        assert_eq!(plan.n_windows, 8);
        assert_eq!(plan.tokens, 8);
        assert_eq!(w.shape, vec![64, 3]);
        assert!(plan.pad_mask.iter().all(|&p| !p));
    }

    #[test]
    fn reverse_of_partition_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (grid, window) in [
            ([4usize, 4, 4], [2usize, 2, 2]),
            ([5, 4, 4], [2, 2, 2]),
            ([6, 6, 6], [4, 3, 2]),
            ([2, 2, 2], [4, 4, 4]),
        ] {
            let s = grid.iter().product();
            let x = rand_tokens(&mut rng, s, 5);
            let (w, plan) = window_partition(&x, grid, window);
            let back = window_reverse(&w, &plan);
            assert_eq!(back, x, "grid {grid:?} window {window:?}");
        }
    }

    #[test]
    fn padded_grid_5x4x4_has_12_windows_and_16_pad_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tokens(&mut rng, 80, 2);
        let (_, plan) = window_partition(&x, [5, 4, 4], [2, 2, 2]);
        assert_eq!(plan.n_windows, 12);
        assert_eq!(plan.padded, [6, 4, 4]);
        let pads = plan.pad_mask.iter().filter(|&&p| p).count();
        assert_eq!(pads, 16); // one 1x4x4 z-slab
    }

    #[test]
    fn window_clipped_to_small_grid() {
        let plan = window_plan([2, 2, 2], [4, 4, 4], 1);
        assert_eq!(plan.window, [2, 2, 2]);
        assert_eq!(plan.n_windows, 1);
        assert_eq!(plan.tokens, 8);
    }

    #[test]
    fn rel_pos_index_is_symmetric_under_negation() {
        let window = [2, 3, 2];
        let idx = rel_pos_index(window);
        let t = 12;
        assert_eq!(idx.len(), t * t);
        let size = rel_pos_table_size(window) as u32;
        assert!(idx.iter().all(|&i| i < size));
        // (i, j) and (j, i) map to mirrored offsets; identical only on the diag.
        let center = (size - 1) / 2;
        for i in 0..t {
            assert_eq!(idx[i * t + i], center);
        }
    }

    #[test]
    fn mask_is_none_without_shift_or_padding() {
        let plan = window_plan([4, 4, 4], [2, 2, 2], 1);
        assert!(attention_mask(&plan, [0, 0, 0]).is_none());
    }

    #[test]
    fn shifted_mask_blocks_cross_window_pairs() {
        let grid = [4, 4, 4];
        let window = [2, 2, 2];
        let shift = [1, 1, 1];
        let plan = window_plan(grid, window, 1);
        let mask = attention_mask(&plan, shift).unwrap();
        let t = plan.tokens;
        // Recompute pre-shift window ids independently and compare.
        for w in 0..plan.n_windows {
            let counts = [2, 2, 2];
            let wz = w / (counts[1] * counts[2]);
            let wy = (w / counts[2]) % counts[1];
            let wx = w % counts[2];
            let origin = [wz * 2, wy * 2, wx * 2];
            let pos = |t_idx: usize| -> [usize; 3] {
                let tz = t_idx / 4;
                let ty = (t_idx / 2) % 2;
                let tx = t_idx % 2;
                [origin[0] + tz, origin[1] + ty, origin[2] + tx]
            };
            for i in 0..t {
                for j in 0..t {
                    let pi = pos(i).map(|v| v);
                    let pj = pos(j);
                    let wid = |p: [usize; 3]| {
                        [
                            (p[0] + shift[0]) % grid[0] / window[0],
                            (p[1] + shift[1]) % grid[1] / window[1],
                            (p[2] + shift[2]) % grid[2] / window[2],
                        ]
                    };
                    let expect_blocked = i != j && wid(pi) != wid(pj);
                    let blocked = mask[(w * t + i) * t + j] < -1e8;
                    assert_eq!(blocked, expect_blocked, "w={w} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn transp_plan_spreads_taps() {
        // One input voxel, cout=1: the 8 outputs pick taps 0..8 in z-major order.
        let plan = transp_expand_plan([1, 1, 1], 1);
        assert_eq!(plan.src, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        let out = plan.apply(&[10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
        assert_eq!(out, vec![10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
    }

    #[test]
    fn channel_first_round_trip() {
        let plan = channel_first_plan(3, 2);
        let out = plan.apply(&[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn roll_and_unroll_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = [3, 4, 5];
        let x = rand_tokens(&mut rng, 60, 2);
        let fwd = roll_plan(grid, [1, 2, 3], 2);
        let bwd = roll_plan(grid, [-1, -2, -3], 2);
        let rolled = fwd.apply(&x.data);
        let back = bwd.apply(&rolled);
        assert_eq!(back, x.data);
    }

    #[test]
    fn patchify_and_merge_cover_all_voxels() {
        let plan = patchify_plan([4, 4, 4], [2, 2, 2], 3);
        let mut seen: Vec<i64> = plan.src.iter().map(|&s| s / 3).collect();
        seen.sort();
        assert_eq!(seen, (0..64).collect::<Vec<i64>>());
        let mplan = merge_plan([4, 4, 4], 5);
        let mut seen2: Vec<i64> = mplan.src.iter().map(|&s| s / 5).collect();
        seen2.sort();
        assert_eq!(seen2, (0..64).collect::<Vec<i64>>());
    }
}
