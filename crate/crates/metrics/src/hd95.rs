//! 95th-percentile symmetric surface distance.

use volseg_core::LabelMap;

use crate::surface::{extract_surface, SurfaceSet};
use crate::{MetricsError, Result};

/// HD95 between the class-`c` surfaces of `pred` and `gt`, in millimetres.
///
/// `max(P95_{a in S_P} min_b d(a,b), P95_{b in S_G} min_a d(a,b))` with
/// voxel-centre Euclidean distances scaled by the voxel spacing and the
/// nearest-rank percentile. Returns `None` when either surface is empty.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::Validation(format!(
            "shape mismatch: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.spacing_mm() != gt.spacing_mm() {
        return Err(MetricsError::Validation(format!(
            "spacing mismatch: pred {:?} vs gt {:?}",
            pred.spacing_mm(),
            gt.spacing_mm()
        )));
    }
    let sp = extract_surface(pred, class);
    let sg = extract_surface(gt, class);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let shape = pred.shape();
    let forward = directed_distances(&sp, &sg, shape);
    let backward = directed_distances(&sg, &sp, shape);
    Ok(Some(percentile95(forward).max(percentile95(backward))))
}

/// Nearest-rank 95th percentile: smallest value with rank >= ceil(0.95 n).
fn percentile95(mut distances: Vec<f64>) -> f64 {
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = distances.len();
    let rank = ((0.95 * n as f64).ceil() as usize).max(1);
    distances[rank - 1]
}

/// For each voxel of `from`, the distance in mm to the nearest voxel of `to`.
///
/// Uses an occupancy grid of `to` and expanding Chebyshev shells around each
/// query voxel: once a candidate is found, the search continues until the
/// shell's lower distance bound exceeds the best hit, which makes the result
/// exact for anisotropic spacing.
fn directed_distances(from: &SurfaceSet, to: &SurfaceSet, shape: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut occupied = vec![false; d * h * w];
    for v in &to.voxels {
        occupied[(v[0] * h + v[1]) * w + v[2]] = true;
    }
    let spacing = from.spacing_mm;
    let min_sp = spacing.iter().cloned().fold(f64::MAX, f64::min);
    let max_radius = d.max(h).max(w) as i64;

    let dist2 = |a: &[usize; 3], bz: i64, by: i64, bx: i64| -> f64 {
        let dz = (a[0] as f64 - bz as f64) * spacing[0];
        let dy = (a[1] as f64 - by as f64) * spacing[1];
        let dx = (a[2] as f64 - bx as f64) * spacing[2];
        dz * dz + dy * dy + dx * dx
    };

    from.voxels
        .iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for r in 0..=max_radius {
                // No voxel at Chebyshev radius >= r can beat `best`.
                let bound = (r as f64) * min_sp;
                if bound * bound > best {
                    break;
                }
                let (az, ay, ax) = (a[0] as i64, a[1] as i64, a[2] as i64);
                let mut visit = |z: i64, y: i64, x: i64, best: &mut f64| {
                    if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
                        return;
                    }
                    if occupied[((z as usize) * h + y as usize) * w + x as usize] {
                        let d2 = dist2(a, z, y, x);
                        if d2 < *best {
                            *best = d2;
                        }
                    }
                };
                if r == 0 {
                    visit(az, ay, ax, &mut best);
                    continue;
                }
                // Two z faces of the shell cube.
                for &z in &[az - r, az + r] {
                    for y in (ay - r)..=(ay + r) {
                        for x in (ax - r)..=(ax + r) {
                            visit(z, y, x, &mut best);
                        }
                    }
                }
                // Two y faces, excluding rows already covered by z faces.
                for &y in &[ay - r, ay + r] {
                    for z in (az - r + 1)..=(az + r - 1) {
                        for x in (ax - r)..=(ax + r) {
                            visit(z, y, x, &mut best);
                        }
                    }
                }
                // Two x faces, excluding both.
                for &x in &[ax - r, ax + r] {
                    for z in (az - r + 1)..=(az + r - 1) {
                        for y in (ay - r + 1)..=(ay + r - 1) {
                            visit(z, y, x, &mut best);
                        }
                    }
                }
            }
            best.sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(shape: [usize; 3], spacing: [f64; 3], voxels: &[[usize; 3]]) -> LabelMap {
        let mut lab = LabelMap::zeros(shape, spacing).unwrap();
        for v in voxels {
            let idx = lab.index(v[0], v[1], v[2]);
            lab.data_mut()[idx] = 1;
        }
        lab
    }

    #[test]
    fn identical_masks_give_zero() {
        let m = map_with([5, 5, 5], [1.0; 3], &[[2, 2, 2], [2, 2, 3]]);
        assert_eq!(hd95(&m, &m, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn single_voxels_three_apart() {
        let p = map_with([5, 5, 5], [1.0; 3], &[[0, 0, 0]]);
        let g = map_with([5, 5, 5], [1.0; 3], &[[0, 0, 3]]);
        let d = hd95(&p, &g, 1).unwrap().unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spacing_scales_distances() {
        // Separation along z with sz = 2.0: 3 voxels -> 6 mm.
        let p = map_with([5, 5, 5], [2.0, 1.0, 1.0], &[[0, 0, 0]]);
        let g = map_with([5, 5, 5], [2.0, 1.0, 1.0], &[[3, 0, 0]]);
        let d = hd95(&p, &g, 1).unwrap().unwrap();
        assert!((d - 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_surface_is_undefined() {
        let p = map_with([4, 4, 4], [1.0; 3], &[]);
        let g = map_with([4, 4, 4], [1.0; 3], &[[1, 1, 1]]);
        assert_eq!(hd95(&p, &g, 1).unwrap(), None);
        assert_eq!(hd95(&g, &p, 1).unwrap(), None);
        assert_eq!(hd95(&p, &p, 1).unwrap(), None);
    }

    #[test]
    fn spacing_mismatch_rejected() {
        let p = map_with([4, 4, 4], [1.0; 3], &[[1, 1, 1]]);
        let g = map_with([4, 4, 4], [2.0, 1.0, 1.0], &[[1, 1, 1]]);
        assert!(hd95(&p, &g, 1).is_err());
    }
}
