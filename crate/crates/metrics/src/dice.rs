//! Dice overlap coefficient on discrete label maps.

use volseg_core::LabelMap;

use crate::{MetricsError, Result};

/// `2|P ∩ G| / (|P| + |G|)` over the binary masks of class `c`.
///
/// Both masks empty yields 1.0; exactly one empty yields 0.0.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::Validation(format!(
            "shape mismatch: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut p = 0u64;
    let mut g = 0u64;
    let mut both = 0u64;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let ia = (*a == class) as u64;
        let ib = (*b == class) as u64;
        p += ia;
        g += ib;
        both += ia & ib;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}
