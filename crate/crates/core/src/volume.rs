//! Dense 3D intensity and label grids.
//!
//! Grids are stored flat in z-major order: index `(z * H + y) * W + x` for a
//! shape `(D, H, W)`. Spacing is physical voxel size in millimetres, ordered
//! `(sz, sy, sx)` to match the shape axes.

use crate::error::{Error, Result};

/// Number of segmentation classes including background.
pub const NUM_CLASSES: usize = 6;

/// Class names in report order. Index = label value.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "Lung R",
    "Lung L",
    "Spinal Cord",
    "Esophagus",
    "GTV",
];

/// Name of a label class, panicking on out-of-range values.
pub fn class_name(class: u8) -> &'static str {
    CLASS_NAMES[class as usize]
}

fn check_shape_spacing(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!("shape must be positive, got {shape:?}")));
    }
    if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Validation(format!(
            "spacing must be positive and finite, got {spacing_mm:?}"
        )));
    }
    Ok(())
}

/// Dense scalar intensity grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape_spacing(shape, spacing_mm)?;
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                expected
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume contains non-finite values".into()));
        }
        Ok(Self { shape, spacing_mm, data })
    }

    pub fn zeros(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        Self::new(shape, spacing_mm, vec![0.0; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable voxel access for builders; values must stay finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }
}

/// Dense integer class grid paired with a [`Volume`].
///
/// Values are restricted to `0..NUM_CLASSES`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_shape_spacing(shape, spacing_mm)?;
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "label data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "label value {v} out of range 0..{NUM_CLASSES}"
            )));
        }
        Ok(Self { shape, spacing_mm, data })
    }

    pub fn zeros(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        Self::new(shape, spacing_mm, vec![0u8; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(z, y, x)]
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    /// True if shape and spacing match the paired volume.
    pub fn is_aligned_with(&self, vol: &Volume) -> bool {
        self.shape == vol.shape() && self.spacing_mm == vol.spacing_mm()
    }
}
