//! Parametric thoracic phantom generator.
//!
//! Stands in for clinical CT cohorts: two lung ellipsoids, a spinal-cord
//! cylinder, an esophagus tube and a tumor blob inside one lung, rasterized
//! onto a voxel grid with per-structure intensities plus Gaussian noise.
//! Output is a pure function of `(spec, seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain, Gaussian};
use crate::volume::{LabelMap, Volume, NUM_CLASSES};
use rand::Rng;

/// Inclusive sampling range.
pub type Range = (f64, f64);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Grid shape (D, H, W).
    pub shape: [usize; 3],
    /// Voxel spacing (sz, sy, sx) in mm.
    pub spacing_mm: [f64; 3],
    /// Lung ellipsoid semi-axis ranges per axis (z, y, x), in voxels.
    pub lung_semi_axes: [Range; 3],
    /// Spinal-cord cylinder radius range, voxels.
    pub cord_radius: Range,
    /// Esophagus tube radius range, voxels.
    pub esophagus_radius: Range,
    /// Tumor blob radius range, voxels.
    pub tumor_radius: Range,
    /// Per-class intensity mean, indexed by label value.
    pub intensity_mean: [f64; NUM_CLASSES],
    /// Per-class intensity noise stddev, indexed by label value.
    pub intensity_std: [f64; NUM_CLASSES],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing_mm: [3.0, 1.7, 1.7],
            lung_semi_axes: [(20.0, 24.0), (11.0, 13.0), (8.0, 10.0)],
            cord_radius: (3.0, 3.8),
            esophagus_radius: (1.8, 2.4),
            tumor_radius: (3.0, 4.5),
            intensity_mean: [0.30, 0.05, 0.05, 0.45, 0.40, 0.60],
            intensity_std: [0.02; NUM_CLASSES],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 16) {
            return Err(Error::Validation(format!(
                "phantom shape must be at least 16 per axis, got {:?}",
                self.shape
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("phantom spacing must be positive".into()));
        }
        for (lo, hi) in self
            .lung_semi_axes
            .iter()
            .chain([&self.cord_radius, &self.esophagus_radius, &self.tumor_radius])
        {
            if !(*lo >= 1.0) || hi < lo {
                return Err(Error::Validation(format!(
                    "geometry range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
                )));
            }
        }
        if self.tumor_radius.1 >= self.tumor_radius.0 && self.tumor_radius.0 < 1.0 {
            return Err(Error::Validation("tumor radius range must start at >= 1 voxel".into()));
        }
        if self.intensity_std.iter().any(|&s| s < 0.0) {
            return Err(Error::Validation("intensity stddev must be >= 0".into()));
        }
        // Structures must fit: lungs are centred laterally at 0.30/0.70 of W.
        let [d, h, w] = self.shape.map(|v| v as f64);
        let (az, ay, ax) = (
            self.lung_semi_axes[0].1,
            self.lung_semi_axes[1].1,
            self.lung_semi_axes[2].1,
        );
        if az + 2.0 > d / 2.0 || ay + 2.0 > 0.45 * h || ax + 2.0 > 0.30 * w {
            return Err(Error::Generation(format!(
                "lung semi-axes ({az}, {ay}, {ax}) do not fit inside shape {:?}",
                self.shape
            )));
        }
        if 0.78 * h + self.cord_radius.1 + 1.0 > h {
            return Err(Error::Generation("spinal cord does not fit inside shape".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.semi[0];
        let dy = (y - self.center[1]) / self.semi[1];
        let dx = (x - self.center[2]) / self.semi[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

fn paint_ellipsoid(lab: &mut LabelMap, e: &Ellipsoid, class: u8) {
    let [d, h, w] = lab.shape();
    let z0 = (e.center[0] - e.semi[0]).floor().max(0.0) as usize;
    let z1 = ((e.center[0] + e.semi[0]).ceil() as usize).min(d - 1);
    let y0 = (e.center[1] - e.semi[1]).floor().max(0.0) as usize;
    let y1 = ((e.center[1] + e.semi[1]).ceil() as usize).min(h - 1);
    let x0 = (e.center[2] - e.semi[2]).floor().max(0.0) as usize;
    let x1 = ((e.center[2] + e.semi[2]).ceil() as usize).min(w - 1);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(z as f64, y as f64, x as f64) {
                    let idx = lab.index(z, y, x);
                    lab.data_mut()[idx] = class;
                }
            }
        }
    }
}

/// Paint a z-aligned tube of given radius between z in `[z0, z1]`.
fn paint_tube(lab: &mut LabelMap, cy: f64, cx: f64, radius: f64, z0: usize, z1: usize, class: u8) {
    let [_, h, w] = lab.shape();
    let r2 = radius * radius;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(h - 1);
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(w - 1);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r2 {
                    let idx = lab.index(z, y, x);
                    lab.data_mut()[idx] = class;
                }
            }
        }
    }
}

/// Paint a sphere, only over voxels currently labelled `lung_class`, so the
/// tumor stays inside its host lung by construction. Returns
/// `(voxels painted, voxels inside the sphere)`.
fn paint_tumor(lab: &mut LabelMap, center: [f64; 3], radius: f64, lung_class: u8) -> (usize, usize) {
    let [d, h, w] = lab.shape();
    let r2 = radius * radius;
    let z0 = (center[0] - radius).floor().max(0.0) as usize;
    let z1 = ((center[0] + radius).ceil() as usize).min(d - 1);
    let y0 = (center[1] - radius).floor().max(0.0) as usize;
    let y1 = ((center[1] + radius).ceil() as usize).min(h - 1);
    let x0 = (center[2] - radius).floor().max(0.0) as usize;
    let x1 = ((center[2] + radius).ceil() as usize).min(w - 1);
    let mut painted = 0;
    let mut in_sphere = 0;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dz = z as f64 - center[0];
                let dy = y as f64 - center[1];
                let dx = x as f64 - center[2];
                if dz * dz + dy * dy + dx * dx <= r2 {
                    in_sphere += 1;
                    let idx = lab.index(z, y, x);
                    if lab.data()[idx] == lung_class {
                        lab.data_mut()[idx] = 5;
                        painted += 1;
                    }
                }
            }
        }
    }
    (painted, in_sphere)
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): Range) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Generate a deterministic `(Volume, LabelMap)` phantom for `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Domain::Phantom, 0);
    let [d, h, w] = spec.shape.map(|v| v as f64);
    let mut lab = LabelMap::zeros(spec.shape, spec.spacing_mm)?;

    // Lungs. Class 1 = Lung R (low x side), class 2 = Lung L.
    let mut lungs = Vec::new();
    for (class, cx_frac) in [(1u8, 0.30), (2u8, 0.70)] {
        let semi = [
            sample_range(&mut rng, spec.lung_semi_axes[0]),
            sample_range(&mut rng, spec.lung_semi_axes[1]),
            sample_range(&mut rng, spec.lung_semi_axes[2]),
        ];
        let center = [
            d / 2.0 + rng.gen_range(-1.5..=1.5),
            0.45 * h + rng.gen_range(-1.5..=1.5),
            cx_frac * w + rng.gen_range(-1.0..=1.0),
        ];
        let e = Ellipsoid { center, semi };
        paint_ellipsoid(&mut lab, &e, class);
        lungs.push(e);
    }

    // Spinal cord: posterior midline cylinder over 85% of the z extent.
    let cord_r = sample_range(&mut rng, spec.cord_radius);
    let cord_cx = 0.5 * w + rng.gen_range(-1.0..=1.0);
    let cord_cy = 0.78 * h;
    let cord_z0 = (0.075 * d) as usize;
    let cord_z1 = ((0.925 * d) as usize).min(spec.shape[0] - 1);
    paint_tube(&mut lab, cord_cy, cord_cx, cord_r, cord_z0, cord_z1, 3);

    // Esophagus: thinner tube anterior to the cord, 70% of the z extent.
    let eso_r = sample_range(&mut rng, spec.esophagus_radius);
    let eso_cx = 0.5 * w + rng.gen_range(-2.0..=2.0);
    let eso_cy = 0.62 * h;
    let eso_z0 = (0.15 * d) as usize;
    let eso_z1 = ((0.85 * d) as usize).min(spec.shape[0] - 1);
    paint_tube(&mut lab, eso_cy, eso_cx, eso_r, eso_z0, eso_z1, 4);

    // Tumor: sphere fully contained in its host lung. Sampling the centre
    // inside the lung uniformly scaled by `margin` guarantees containment:
    // |A^-1 (c - c0)| <= margin and |A^-1 u| <= r / a_min for |u| <= r, so
    // |A^-1 (c + u - c0)| <= margin + r / a_min < 1.
    let host = if rng.gen_bool(0.5) { 0usize } else { 1 };
    let lung = &lungs[host];
    let lung_class = (host + 1) as u8;
    let radius = sample_range(&mut rng, spec.tumor_radius);
    let a_min = lung.semi.iter().cloned().fold(f64::MAX, f64::min);
    let margin = 1.0 - (radius + 0.5) / a_min;
    if margin <= 0.0 {
        return Err(Error::Generation(format!(
            "tumor radius {radius:.1} does not fit inside a lung with min semi-axis {a_min:.1}"
        )));
    }
    let mut painted = 0;
    for _attempt in 0..64 {
        // The /sqrt(3) keeps the per-axis box sample inside the scaled ellipsoid.
        let s = margin / 3f64.sqrt();
        let center = [
            lung.center[0] + rng.gen_range(-1.0..=1.0) * lung.semi[0] * s,
            lung.center[1] + rng.gen_range(-1.0..=1.0) * lung.semi[1] * s,
            lung.center[2] + rng.gen_range(-1.0..=1.0) * lung.semi[2] * s,
        ];
        let (p, in_sphere) = paint_tumor(&mut lab, center, radius, lung_class);
        if p == in_sphere && p > 0 {
            painted = p;
            break;
        }
        // Undo a partial paint before retrying.
        if p > 0 {
            for v in lab.data_mut().iter_mut() {
                if *v == 5 {
                    *v = lung_class;
                }
            }
        }
    }
    if painted == 0 {
        return Err(Error::Generation(
            "could not place the tumor fully inside a lung".into(),
        ));
    }

    // Check the difficulty ordering the generator promises.
    let counts = lab.class_counts();
    let lung_min = counts[1].min(counts[2]);
    if !(lung_min > counts[3] && counts[3] > counts[4] && counts[4] >= counts[5] && counts[5] >= 1)
    {
        return Err(Error::Generation(format!(
            "structure voxel counts {counts:?} violate lungs > cord > esophagus >= tumor >= 1"
        )));
    }

    // Intensities: per-class mean plus Gaussian noise, single z-major pass.
    let mut vol = Volume::zeros(spec.shape, spec.spacing_mm)?;
    let mut gauss = Gaussian::new();
    for i in 0..lab.num_voxels() {
        let class = lab.data()[i] as usize;
        let z = gauss.sample(&mut rng);
        vol.data_mut()[i] = (spec.intensity_mean[class] + spec.intensity_std[class] * z) as f32;
    }
    Ok((vol, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_spec_and_seed() {
        let spec = PhantomSpec::default();
        let (v1, l1) = generate_phantom(&spec, 42).unwrap();
        let (v2, l2) = generate_phantom(&spec, 42).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
        let (_, l3) = generate_phantom(&spec, 43).unwrap();
        assert_ne!(l1, l3);
    }

    #[test]
    fn default_spec_seed0_orders_structure_counts() {
        let (_, lab) = generate_phantom(&PhantomSpec::default(), 0).unwrap();
        let c = lab.class_counts();
        assert!(c[1] > c[3], "lung R {} vs cord {}", c[1], c[3]);
        assert!(c[2] > c[3], "lung L {} vs cord {}", c[2], c[3]);
        assert!(c[3] > c[4], "cord {} vs esophagus {}", c[3], c[4]);
        assert!(c[4] >= c[5], "esophagus {} vs GTV {}", c[4], c[5]);
        assert!(c[5] >= 1, "GTV count {}", c[5]);
    }

    #[test]
    fn all_six_classes_present_across_seeds() {
        let spec = PhantomSpec::default();
        for seed in 0..8 {
            let (_, lab) = generate_phantom(&spec, seed).unwrap();
            let c = lab.class_counts();
            assert!(c.iter().all(|&n| n > 0), "seed {seed}: counts {c:?}");
        }
    }

    #[test]
    fn zero_noise_yields_exact_means() {
        let spec = PhantomSpec {
            intensity_std: [0.0; NUM_CLASSES],
            ..PhantomSpec::default()
        };
        let (vol, lab) = generate_phantom(&spec, 7).unwrap();
        for i in 0..lab.num_voxels() {
            let class = lab.data()[i] as usize;
            assert_eq!(vol.data()[i], spec.intensity_mean[class] as f32);
        }
    }

    #[test]
    fn tumor_sits_inside_one_lung() {
        // Every GTV voxel must be 6-adjacent only to GTV or lung voxels.
        let (_, lab) = generate_phantom(&PhantomSpec::default(), 3).unwrap();
        let [d, h, w] = lab.shape();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if lab.get(z, y, x) != 5 {
                        continue;
                    }
                    for (dz, dy, dx) in
                        [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                            panic!("GTV voxel on the volume boundary");
                        }
                        let n = lab.get(nz as usize, ny as usize, nx as usize);
                        assert!(
                            n == 5 || n == 1 || n == 2,
                            "GTV touches class {n} at ({nz},{ny},{nx})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_structures_are_rejected() {
        let spec = PhantomSpec {
            shape: [24, 24, 24],
            lung_semi_axes: [(20.0, 24.0), (11.0, 13.0), (8.0, 10.0)],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec, 0).is_err());
    }
}
