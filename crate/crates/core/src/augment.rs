//! Augmentation pipeline: intensity scaling/shifting, boundary cropping,
//! affine transformation, 3D elastic deformation and Gaussian noise.
//!
//! Geometric transforms are applied with identical sampled parameters to the
//! volume and its labels; labels are resampled nearest-neighbour, intensities
//! trilinearly. Intensity-only transforms touch the volume alone. The whole
//! pipeline is deterministic in the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain, Gaussian};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of multiplying intensities by a factor from `scale_range`.
    pub p_intensity_scale: f64,
    pub scale_range: (f64, f64),
    /// Probability of adding an offset from `shift_range`.
    pub p_intensity_shift: f64,
    pub shift_range: (f64, f64),
    /// Probability of cropping up to `crop_margin` voxels from each boundary.
    pub p_crop: f64,
    pub crop_margin: usize,
    /// Probability of an affine transform (rotation, isotropic scale,
    /// translation), sampled from the ranges below.
    pub p_affine: f64,
    pub rotate_deg: (f64, f64),
    pub affine_scale: (f64, f64),
    pub translate_vox: (f64, f64),
    /// Probability of an elastic deformation: uniform displacements up to
    /// `elastic_max_disp` voxels on a control grid every
    /// `elastic_grid_spacing` voxels, trilinearly upsampled.
    pub p_elastic: f64,
    pub elastic_grid_spacing: usize,
    pub elastic_max_disp: f64,
    /// Probability of additive Gaussian noise with stddev `noise_std`.
    pub p_noise: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_intensity_scale: 0.5,
            scale_range: (0.9, 1.1),
            p_intensity_shift: 0.5,
            shift_range: (-0.05, 0.05),
            p_crop: 0.3,
            crop_margin: 4,
            p_affine: 0.5,
            rotate_deg: (-10.0, 10.0),
            affine_scale: (0.95, 1.05),
            translate_vox: (-3.0, 3.0),
            p_elastic: 0.3,
            elastic_grid_spacing: 16,
            elastic_max_disp: 2.0,
            p_noise: 0.5,
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment` is the identity.
    pub fn identity() -> Self {
        Self {
            p_intensity_scale: 0.0,
            p_intensity_shift: 0.0,
            p_crop: 0.0,
            p_affine: 0.0,
            p_elastic: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_intensity_scale", self.p_intensity_scale),
            ("p_intensity_shift", self.p_intensity_shift),
            ("p_crop", self.p_crop),
            ("p_affine", self.p_affine),
            ("p_elastic", self.p_elastic),
            ("p_noise", self.p_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name}={p} must be in [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("shift_range", self.shift_range),
            ("rotate_deg", self.rotate_deg),
            ("affine_scale", self.affine_scale),
            ("translate_vox", self.translate_vox),
        ] {
            if hi < lo {
                return Err(Error::Validation(format!("{name}=({lo}, {hi}) is not ordered")));
            }
        }
        if self.affine_scale.0 <= 0.0 {
            return Err(Error::Validation("affine scale must be positive".into()));
        }
        if self.elastic_grid_spacing == 0 {
            return Err(Error::Validation("elastic grid spacing must be >= 1".into()));
        }
        if self.elastic_max_disp < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Validation("elastic_max_disp and noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[inline]
fn trilinear(vol: &Volume, z: f64, y: f64, x: f64) -> f32 {
    let [d, h, w] = vol.shape();
    let z0 = z.floor();
    let y0 = y.floor();
    let x0 = x.floor();
    let fz = z - z0;
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0f64;
    for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        let zz = z0 as i64 + dz;
        if zz < 0 || zz >= d as i64 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 as i64 + dy;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 as i64 + dx;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                acc += wz * wy * wx * vol.get(zz as usize, yy as usize, xx as usize) as f64;
            }
        }
    }
    acc as f32
}

#[inline]
fn nearest_label(lab: &LabelMap, z: f64, y: f64, x: f64) -> u8 {
    let [d, h, w] = lab.shape();
    let zz = z.round() as i64;
    let yy = y.round() as i64;
    let xx = x.round() as i64;
    if zz < 0 || yy < 0 || xx < 0 || zz >= d as i64 || yy >= h as i64 || xx >= w as i64 {
        0
    } else {
        lab.get(zz as usize, yy as usize, xx as usize)
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// Rotations in (z, y, x) coordinates about each axis.
fn rotation_matrix(az_deg: f64, ay_deg: f64, ax_deg: f64) -> Mat3 {
    let (sz, cz) = az_deg.to_radians().sin_cos();
    let (sy, cy) = ay_deg.to_radians().sin_cos();
    let (sx, cx) = ax_deg.to_radians().sin_cos();
    // About the x axis: mixes (z, y).
    let rx: Mat3 = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    // About the y axis: mixes (z, x).
    let ry: Mat3 = [[cy, 0.0, -sy], [0.0, 1.0, 0.0], [sy, 0.0, cy]];
    // About the z axis: mixes (y, x).
    let rz: Mat3 = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

struct AffineParams {
    rot: Mat3,
    scale: f64,
    translate: [f64; 3],
}

/// Inverse-map an output voxel centre to its source coordinate.
fn affine_source(p: &AffineParams, center: [f64; 3], out: [f64; 3]) -> [f64; 3] {
    let rot_t = transpose(&p.rot);
    let v = [
        out[0] - center[0] - p.translate[0],
        out[1] - center[1] - p.translate[1],
        out[2] - center[2] - p.translate[2],
    ];
    let mut src = [0.0; 3];
    for (i, row) in rot_t.iter().enumerate() {
        src[i] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]) / p.scale + center[i];
    }
    src
}

fn apply_affine(vol: &Volume, lab: &LabelMap, p: &AffineParams) -> Result<(Volume, LabelMap)> {
    let shape = vol.shape();
    let center = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out_v = Volume::zeros(shape, vol.spacing_mm())?;
    let mut out_l = LabelMap::zeros(shape, lab.spacing_mm())?;
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let src = affine_source(p, center, [z as f64, y as f64, x as f64]);
                out_v.data_mut()[i] = trilinear(vol, src[0], src[1], src[2]);
                out_l.data_mut()[i] = nearest_label(lab, src[0], src[1], src[2]);
                i += 1;
            }
        }
    }
    Ok((out_v, out_l))
}

/// Displacement field sampled on a coarse control grid, upsampled trilinearly.
struct ElasticField {
    nodes: [usize; 3],
    spacing: f64,
    disp: Vec<[f64; 3]>,
}

impl ElasticField {
    fn sample(shape: [usize; 3], spacing: usize, max_disp: f64, rng: &mut ChaCha8Rng) -> Self {
        let nodes = shape.map(|n| (n - 1) / spacing + 2);
        let mut disp = Vec::with_capacity(nodes.iter().product());
        for _ in 0..nodes.iter().product::<usize>() {
            let d = [
                rng.gen_range(-max_disp..=max_disp),
                rng.gen_range(-max_disp..=max_disp),
                rng.gen_range(-max_disp..=max_disp),
            ];
            disp.push(d);
        }
        Self { nodes, spacing: spacing as f64, disp }
    }

    fn at(&self, z: f64, y: f64, x: f64) -> [f64; 3] {
        let coords = [z / self.spacing, y / self.spacing, x / self.spacing];
        let base = coords.map(|c| c.floor() as usize);
        let frac = [coords[0] - base[0] as f64, coords[1] - base[1] as f64, coords[2] - base[2] as f64];
        let mut acc = [0.0f64; 3];
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
            let nz = (base[0] + dz).min(self.nodes[0] - 1);
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let ny = (base[1] + dy).min(self.nodes[1] - 1);
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                    let nx = (base[2] + dx).min(self.nodes[2] - 1);
                    let node = &self.disp[(nz * self.nodes[1] + ny) * self.nodes[2] + nx];
                    let w = wz * wy * wx;
                    for a in 0..3 {
                        acc[a] += w * node[a];
                    }
                }
            }
        }
        acc
    }
}

fn apply_elastic(vol: &Volume, lab: &LabelMap, field: &ElasticField) -> Result<(Volume, LabelMap)> {
    let shape = vol.shape();
    let mut out_v = Volume::zeros(shape, vol.spacing_mm())?;
    let mut out_l = LabelMap::zeros(shape, lab.spacing_mm())?;
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let d = field.at(z as f64, y as f64, x as f64);
                let (sz, sy, sx) = (z as f64 + d[0], y as f64 + d[1], x as f64 + d[2]);
                out_v.data_mut()[i] = trilinear(vol, sz, sy, sx);
                out_l.data_mut()[i] = nearest_label(lab, sz, sy, sx);
                i += 1;
            }
        }
    }
    Ok((out_v, out_l))
}

/// Run the augmentation pipeline on a paired volume and label map.
pub fn augment(
    vol: &Volume,
    lab: &LabelMap,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Volume, LabelMap)> {
    cfg.validate()?;
    if !lab.is_aligned_with(vol) {
        return Err(Error::Validation("volume and label map are not aligned".into()));
    }
    let mut rng = stream_rng(seed, Domain::Augment, 0);
    let mut v = vol.clone();
    let mut l = lab.clone();

    // Intensity scaling.
    if rng.gen::<f64>() < cfg.p_intensity_scale {
        let s = sample_range(&mut rng, cfg.scale_range);
        for val in v.data_mut() {
            *val = (*val as f64 * s) as f32;
        }
    }
    // Intensity shifting.
    if rng.gen::<f64>() < cfg.p_intensity_shift {
        let t = sample_range(&mut rng, cfg.shift_range);
        for val in v.data_mut() {
            *val = (*val as f64 + t) as f32;
        }
    }
    // Boundary cropping.
    if rng.gen::<f64>() < cfg.p_crop {
        let min_dim = *v.shape().iter().min().unwrap();
        if cfg.crop_margin * 2 >= min_dim {
            return Err(Error::Validation(format!(
                "crop margin {} is at least half the smallest dimension {}",
                cfg.crop_margin, min_dim
            )));
        }
        let shape = v.shape();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = rng.gen_range(0..=cfg.crop_margin);
            hi[a] = rng.gen_range(0..=cfg.crop_margin);
        }
        let new_shape = [
            shape[0] - lo[0] - hi[0],
            shape[1] - lo[1] - hi[1],
            shape[2] - lo[2] - hi[2],
        ];
        let mut vdata = Vec::with_capacity(new_shape.iter().product());
        let mut ldata = Vec::with_capacity(new_shape.iter().product());
        for z in 0..new_shape[0] {
            for y in 0..new_shape[1] {
                let row = v.index(lo[0] + z, lo[1] + y, lo[2]);
                vdata.extend_from_slice(&v.data()[row..row + new_shape[2]]);
                ldata.extend_from_slice(&l.data()[row..row + new_shape[2]]);
            }
        }
        v = Volume::new(new_shape, v.spacing_mm(), vdata)?;
        l = LabelMap::new(new_shape, l.spacing_mm(), ldata)?;
    }
    // Affine.
    if rng.gen::<f64>() < cfg.p_affine {
        let az = sample_range(&mut rng, cfg.rotate_deg);
        let ay = sample_range(&mut rng, cfg.rotate_deg);
        let ax = sample_range(&mut rng, cfg.rotate_deg);
        let scale = sample_range(&mut rng, cfg.affine_scale);
        let translate = [
            sample_range(&mut rng, cfg.translate_vox),
            sample_range(&mut rng, cfg.translate_vox),
            sample_range(&mut rng, cfg.translate_vox),
        ];
        let params = AffineParams { rot: rotation_matrix(az, ay, ax), scale, translate };
        let (nv, nl) = apply_affine(&v, &l, &params)?;
        v = nv;
        l = nl;
    }
    // Elastic deformation.
    if rng.gen::<f64>() < cfg.p_elastic {
        let field = ElasticField::sample(v.shape(), cfg.elastic_grid_spacing, cfg.elastic_max_disp, &mut rng);
        let (nv, nl) = apply_elastic(&v, &l, &field)?;
        v = nv;
        l = nl;
    }
    // Gaussian noise.
    if rng.gen::<f64>() < cfg.p_noise {
        let mut gauss = Gaussian::new();
        for val in v.data_mut() {
            *val = (*val as f64 + cfg.noise_std * gauss.sample(&mut rng)) as f32;
        }
    }
    Ok((v, l))
}
