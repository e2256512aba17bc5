//! Volumetric data model and data pipeline for thoracic segmentation experiments.
//!
//! This crate owns everything that happens before a voxel reaches a model:
//! dense [`Volume`]/[`LabelMap`] grids with physical spacing, the bit-exact
//! `.mvol` file format, a parametric thoracic phantom generator, dataset
//! splitting, the augmentation pipeline, and patch extraction.
//!
//! All operations are pure functions of their inputs (seeds included), so they
//! are safe to call concurrently.

pub mod augment;
pub mod error;
pub mod io;
pub mod patch;
pub mod phantom;
pub mod rng;
pub mod split;
pub mod volume;

pub use augment::{augment, AugmentConfig};
pub use error::{Error, Result};
pub use io::{
    read_agreement_grid, read_labelmap, read_mvol, read_volume, write_labelmap, write_mvol,
    write_u8_grid, write_volume, MvolFile,
};
pub use patch::extract_patch;
pub use phantom::{generate_phantom, PhantomSpec};
pub use split::{split_dataset, SplitRatios};
pub use volume::{class_name, LabelMap, Volume, CLASS_NAMES, NUM_CLASSES};
