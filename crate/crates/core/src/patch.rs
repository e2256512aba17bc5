//! Foreground-biased patch extraction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};
use crate::volume::{LabelMap, Volume};

/// Extract a contiguous sub-block from a paired volume and label map.
///
/// With probability `fg_bias` the patch is centred on a uniformly sampled
/// foreground voxel (class >= 1), clamped so the patch stays in bounds;
/// otherwise the corner offset is uniform over the valid range. Deterministic
/// in `seed`.
pub fn extract_patch(
    vol: &Volume,
    lab: &LabelMap,
    patch_shape: [usize; 3],
    seed: u64,
    fg_bias: f64,
) -> Result<(Volume, LabelMap)> {
    if !lab.is_aligned_with(vol) {
        return Err(Error::Validation("volume and label map are not aligned".into()));
    }
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::Validation(format!("fg_bias {fg_bias} must be in [0, 1]")));
    }
    let shape = vol.shape();
    for a in 0..3 {
        if patch_shape[a] == 0 || patch_shape[a] > shape[a] {
            return Err(Error::Validation(format!(
                "patch shape {patch_shape:?} does not fit in volume {shape:?}"
            )));
        }
    }

    let mut rng = stream_rng(seed, Domain::Patch, 0);
    let corner = if rng.gen::<f64>() < fg_bias {
        let fg: Vec<usize> = lab
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 1)
            .map(|(i, _)| i)
            .collect();
        if fg.is_empty() {
            uniform_corner(&mut rng, shape, patch_shape)
        } else {
            let idx = fg[rng.gen_range(0..fg.len())];
            let center = [
                idx / (shape[1] * shape[2]),
                (idx / shape[2]) % shape[1],
                idx % shape[2],
            ];
            let mut corner = [0usize; 3];
            for a in 0..3 {
                let half = patch_shape[a] / 2;
                let lo = center[a].saturating_sub(half);
                corner[a] = lo.min(shape[a] - patch_shape[a]);
            }
            corner
        }
    } else {
        uniform_corner(&mut rng, shape, patch_shape)
    };

    let mut vdata = Vec::with_capacity(patch_shape.iter().product());
    let mut ldata = Vec::with_capacity(patch_shape.iter().product());
    for z in 0..patch_shape[0] {
        for y in 0..patch_shape[1] {
            let row = vol.index(corner[0] + z, corner[1] + y, corner[2]);
            vdata.extend_from_slice(&vol.data()[row..row + patch_shape[2]]);
            ldata.extend_from_slice(&lab.data()[row..row + patch_shape[2]]);
        }
    }
    Ok((
        Volume::new(patch_shape, vol.spacing_mm(), vdata)?,
        LabelMap::new(patch_shape, lab.spacing_mm(), ldata)?,
    ))
}

fn uniform_corner<R: Rng>(rng: &mut R, shape: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    let mut corner = [0usize; 3];
    for a in 0..3 {
        let max = shape[a] - patch[a];
        corner[a] = if max == 0 { 0 } else { rng.gen_range(0..=max) };
    }
    corner
}
