//! Segmentation evaluation: per-class Dice and 95th-percentile symmetric
//! surface distance (HD95), plus table-style reporting.
//!
//! Conventions (fixed so tables are reproducible):
//! - Dice of two empty masks is 1.0; exactly one empty mask gives 0.0.
//! - HD95 is undefined when either surface is empty; undefined values are
//!   reported and excluded from means.
//! - Percentiles use the nearest-rank method: the smallest value whose rank
//!   is at least `ceil(0.95 * n)`.
//! - Surfaces are 6-connectivity boundary voxels; distances are voxel-centre
//!   Euclidean distances in millimetres.

pub mod dice;
pub mod hd95;
pub mod report;
pub mod surface;

pub use dice::dice;
pub use hd95::hd95;
pub use report::{evaluate, CaseMetrics, ClassSummary, MetricsReport};
pub use surface::{extract_surface, SurfaceSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Foreground classes in report order (label values 1..=5).
pub const FOREGROUND_CLASSES: [u8; 5] = [1, 2, 3, 4, 5];
