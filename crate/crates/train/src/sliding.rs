//! Full-volume inference by overlapping tiles.

use rand_chacha::ChaCha8Rng;
use volseg_core::{LabelMap, Volume};
use volseg_model::{DropoutMode, ModelState};

use crate::{Result, TrainError};

/// Channel-first per-voxel class probabilities `(6, D, H, W)`.
#[derive(Clone, Debug)]
pub struct ProbGrid {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub probs: Vec<f64>,
}

impl ProbGrid {
    /// Argmax labels, ties broken towards the smaller class index.
    pub fn argmax_labels(&self) -> LabelMap {
        let voxels: usize = self.shape.iter().product();
        let mut data = vec![0u8; voxels];
        for (v, out) in data.iter_mut().enumerate() {
            let mut best_c = 0u8;
            let mut best = self.probs[v];
            for c in 1..6usize {
                let p = self.probs[c * voxels + v];
                if p > best {
                    best = p;
                    best_c = c as u8;
                }
            }
            *out = best_c;
        }
        LabelMap::new(self.shape, self.spacing_mm, data).expect("argmax labels are valid")
    }
}

/// Tile start offsets covering `size` with `patch`-long tiles at `stride`.
pub fn tile_starts(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(patch <= size);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= size {
            starts.push(size - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Tile the volume with overlapping patches, average per-voxel probabilities
/// over covering tiles with uniform weights, and crop any padding.
///
/// The volume is zero-padded symmetrically up to the patch size when needed.
/// Tiles are visited in z-major start order; with dropout off the result is
/// a deterministic pure function of `(state, volume)`.
pub fn sliding_window_predict(
    state: &ModelState,
    vol: &Volume,
    patch: [usize; 3],
    overlap: f64,
    dropout: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<ProbGrid> {
    if !(0.0..=0.9).contains(&overlap) {
        return Err(TrainError::Validation(format!(
            "overlap {overlap} must lie in [0, 0.9]"
        )));
    }
    state.config.validate_input_shape(patch)?;
    let shape = vol.shape();
    // Symmetric zero padding up to at least the patch size.
    let mut padded = [0usize; 3];
    let mut lo = [0usize; 3];
    for a in 0..3 {
        padded[a] = shape[a].max(patch[a]);
        lo[a] = (padded[a] - shape[a]) / 2;
    }
    let mut buf = vec![0.0f32; padded[0] * padded[1] * padded[2]];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let src = vol.index(z, y, 0);
            let dst = ((z + lo[0]) * padded[1] + (y + lo[1])) * padded[2] + lo[2];
            buf[dst..dst + shape[2]].copy_from_slice(&vol.data()[src..src + shape[2]]);
        }
    }

    let mut starts = [vec![], vec![], vec![]];
    for a in 0..3 {
        let stride = ((patch[a] as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        starts[a] = tile_starts(padded[a], patch[a], stride);
    }

    let voxels_padded: usize = padded.iter().product();
    let patch_voxels: usize = patch.iter().product();
    let mut sum = vec![0.0f64; 6 * voxels_padded];
    let mut count = vec![0u32; voxels_padded];
    let mut tile = vec![0.0f32; patch_voxels];

    for &sz in &starts[0] {
        for &sy in &starts[1] {
            for &sx in &starts[2] {
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let src = ((sz + z) * padded[1] + sy + y) * padded[2] + sx;
                        let dst = (z * patch[1] + y) * patch[2];
                        tile[dst..dst + patch[2]].copy_from_slice(&buf[src..src + patch[2]]);
                    }
                }
                let logits = state.forward(&tile, patch, dropout, rng)?;
                let probs = state.probabilities_channel_first(&logits, patch_voxels);
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let pv = ((sz + z) * padded[1] + sy + y) * padded[2] + sx + x;
                            let tv = (z * patch[1] + y) * patch[2] + x;
                            count[pv] += 1;
                            for c in 0..6 {
                                sum[c * voxels_padded + pv] += probs[c * patch_voxels + tv];
                            }
                        }
                    }
                }
            }
        }
    }

    // Average and crop the padding.
    let voxels: usize = shape.iter().product();
    let mut probs = vec![0.0f64; 6 * voxels];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let pv = ((z + lo[0]) * padded[1] + (y + lo[1])) * padded[2] + (x + lo[2]);
                let ov = (z * shape[1] + y) * shape[2] + x;
                let n = count[pv] as f64;
                debug_assert!(n >= 1.0);
                for c in 0..6 {
                    probs[c * voxels + ov] = sum[c * voxels_padded + pv] / n;
                }
            }
        }
    }
    Ok(ProbGrid { shape, spacing_mm: vol.spacing_mm(), probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use volseg_model::{init_model, ModelConfig};

    fn micro_state() -> ModelState {
        let cfg = ModelConfig {
            embed_dim: 4,
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 4, 8],
            input_patch_shape: [16, 16, 16],
            dropout_rate: 0.3,
            ..ModelConfig::default()
        };
        init_model(&cfg, 0).unwrap()
    }

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i % 41) as f32 / 41.0).collect();
        Volume::new(shape, [1.0; 3], data).unwrap()
    }

    #[test]
    fn patch_sized_volume_equals_single_forward() {
        let state = micro_state();
        let vol = ramp_volume([16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid =
            sliding_window_predict(&state, &vol, [16, 16, 16], 0.0, DropoutMode::Off, &mut rng)
                .unwrap();
        let logits = state
            .forward(vol.data(), [16, 16, 16], DropoutMode::Off, &mut rng)
            .unwrap();
        let direct = state.probabilities_channel_first(&logits, 16 * 16 * 16);
        assert_eq!(grid.probs, direct);
    }

    #[test]
    fn tile_starts_cover_and_clamp() {
        assert_eq!(tile_starts(48, 32, 16), vec![0, 16]);
        assert_eq!(tile_starts(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(tile_starts(32, 32, 16), vec![0]);
        // Every voxel covered.
        for (size, patch, stride) in [(48, 32, 16), (50, 16, 9), (33, 16, 16)] {
            let starts = tile_starts(size, patch, stride);
            let mut covered = vec![false; size];
            for &s in &starts {
                for v in covered.iter_mut().skip(s).take(patch) {
                    *v = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "{size} {patch} {stride}");
        }
    }

    #[test]
    fn coverage_counts_match_enumeration() {
        // 48^3 volume, 16^3 patch, overlap 0.5: compare per-voxel coverage
        // against an independent tiling enumeration.
        let state = micro_state();
        let vol = ramp_volume([48, 32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid =
            sliding_window_predict(&state, &vol, [16, 16, 16], 0.5, DropoutMode::Off, &mut rng)
                .unwrap();
        assert_eq!(grid.probs.len(), 6 * 48 * 32 * 32);
        // Independent enumeration: every voxel covered by >= 1 tile.
        let starts_z = tile_starts(48, 16, 8);
        let starts_y = tile_starts(32, 16, 8);
        let mut cov = vec![0usize; 48 * 32 * 32];
        for &sz in &starts_z {
            for &sy in &starts_y {
                for &sx in &starts_y {
                    for z in sz..sz + 16 {
                        for y in sy..sy + 16 {
                            for x in sx..sx + 16 {
                                cov[(z * 32 + y) * 32 + x] += 1;
                            }
                        }
                    }
                }
            }
        }
        assert!(cov.iter().all(|&c| c >= 1));
    }

    #[test]
    fn small_volume_is_padded_and_cropped() {
        let state = micro_state();
        let vol = ramp_volume([10, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid =
            sliding_window_predict(&state, &vol, [16, 16, 16], 0.5, DropoutMode::Off, &mut rng)
                .unwrap();
        assert_eq!(grid.shape, [10, 16, 16]);
        assert_eq!(grid.probs.len(), 6 * 10 * 16 * 16);
    }

    #[test]
    fn overlap_out_of_range_rejected() {
        let state = micro_state();
        let vol = ramp_volume([16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sliding_window_predict(&state, &vol, [16, 16, 16], 0.95, DropoutMode::Off, &mut rng)
            .is_err());
    }
}
