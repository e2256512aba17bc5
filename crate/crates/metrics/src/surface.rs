//! Boundary voxel extraction.

use volseg_core::LabelMap;

/// Voxels of a class with at least one six-connected neighbour outside the
/// class, or lying on the volume edge.
#[derive(Clone, Debug)]
pub struct SurfaceSet {
    pub voxels: Vec<[usize; 3]>,
    pub spacing_mm: [f64; 3],
}

impl SurfaceSet {
    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }
}

const NEIGHBOURS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// Extract the 6-connectivity boundary of class `c`.
pub fn extract_surface(lab: &LabelMap, class: u8) -> SurfaceSet {
    let [d, h, w] = lab.shape();
    let mut voxels = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if lab.get(z, y, x) != class {
                    continue;
                }
                let mut boundary = false;
                for n in NEIGHBOURS {
                    let (nz, ny, nx) = (z as i64 + n[0], y as i64 + n[1], x as i64 + n[2]);
                    if nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as i64
                        || ny >= h as i64
                        || nx >= w as i64
                    {
                        boundary = true;
                        break;
                    }
                    if lab.get(nz as usize, ny as usize, nx as usize) != class {
                        boundary = true;
                        break;
                    }
                }
                if boundary {
                    voxels.push([z, y, x]);
                }
            }
        }
    }
    SurfaceSet { voxels, spacing_mm: lab.spacing_mm() }
}
