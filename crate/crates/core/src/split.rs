//! Deterministic dataset splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Domain};
use rand::seq::SliceRandom;

/// Train/val/test fractions. Must sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Validation(format!(
                    "split ratio {name}={v} must lie in (0, 1)"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Partition `ids` into train/val/test.
///
/// Val and test sizes are `round(n * ratio)`; the remainder goes to train.
/// The shuffle is a seeded Fisher-Yates, so the partition is deterministic.
pub fn split_dataset(
    ids: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::Validation("cannot split an empty id list".into()));
    }
    {
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::Validation("ids must be distinct".into()));
        }
    }
    ratios.validate()?;
    let n = ids.len();
    let n_val = ((n as f64) * ratios.val).round() as usize;
    let n_test = ((n as f64) * ratios.test).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Validation(format!(
            "rounded val+test sizes {}+{} exceed {n} ids",
            n_val, n_test
        )));
    }
    let n_train = n - n_val - n_test;

    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = stream_rng(seed, Domain::Split, 0);
    shuffled.shuffle(&mut rng);

    let train = shuffled[..n_train].to_vec();
    let val = shuffled[n_train..n_train + n_val].to_vec();
    let test = shuffled[n_train + n_val..].to_vec();
    Ok((train, val, test))
}
