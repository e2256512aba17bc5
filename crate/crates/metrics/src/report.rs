//! Test-set evaluation and table reporting.

use volseg_core::{class_name, LabelMap};

use crate::{dice, hd95, MetricsError, Result, FOREGROUND_CLASSES};

/// Per-case, per-class metric values.
#[derive(Clone, Debug)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Indexed in `FOREGROUND_CLASSES` order.
    pub dice: [f64; 5],
    pub hd95_mm: [Option<f64>; 5],
}

/// Per-class aggregation over the test set.
#[derive(Clone, Debug)]
pub struct ClassSummary {
    pub class: u8,
    pub mean_dice: f64,
    /// Mean over cases where HD95 is defined; `None` if it never is.
    pub mean_hd95_mm: Option<f64>,
    /// Number of cases excluded from the HD95 mean.
    pub hd95_undefined_cases: usize,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub per_class: Vec<ClassSummary>,
    /// Unweighted mean over the 5 foreground classes.
    pub overall_dice: f64,
    /// Mean over classes with a defined HD95 mean; `None` if none have one.
    pub overall_hd95_mm: Option<f64>,
}

/// Evaluate aligned prediction/ground-truth pairs.
pub fn evaluate(pairs: &[(String, &LabelMap, &LabelMap)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(MetricsError::Validation("empty test set".into()));
    }
    let mut cases = Vec::with_capacity(pairs.len());
    for (id, pred, gt) in pairs {
        let mut d = [0.0; 5];
        let mut h = [None; 5];
        for (i, &c) in FOREGROUND_CLASSES.iter().enumerate() {
            d[i] = dice(pred, gt, c)?;
            h[i] = hd95(pred, gt, c)?;
        }
        cases.push(CaseMetrics { case_id: id.clone(), dice: d, hd95_mm: h });
    }

    let mut per_class = Vec::with_capacity(5);
    for (i, &c) in FOREGROUND_CLASSES.iter().enumerate() {
        let mean_dice = cases.iter().map(|m| m.dice[i]).sum::<f64>() / cases.len() as f64;
        let defined: Vec<f64> = cases.iter().filter_map(|m| m.hd95_mm[i]).collect();
        let mean_hd95_mm = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        per_class.push(ClassSummary {
            class: c,
            mean_dice,
            mean_hd95_mm,
            hd95_undefined_cases: cases.len() - defined.len(),
        });
    }

    let overall_dice = per_class.iter().map(|s| s.mean_dice).sum::<f64>() / per_class.len() as f64;
    let defined: Vec<f64> = per_class.iter().filter_map(|s| s.mean_hd95_mm).collect();
    let overall_hd95_mm = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    Ok(MetricsReport { cases, per_class, overall_dice, overall_hd95_mm })
}

impl MetricsReport {
    /// Per-case CSV: `case,class,dice,hd95_mm,hd95_defined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,class,dice,hd95_mm,hd95_defined\n");
        for case in &self.cases {
            for (i, &c) in FOREGROUND_CLASSES.iter().enumerate() {
                let (hd, defined) = match case.hd95_mm[i] {
                    Some(v) => (format!("{v:.6}"), "true"),
                    None => (String::new(), "false"),
                };
                out.push_str(&format!(
                    "{},{},{:.6},{},{}\n",
                    case.case_id,
                    class_name(c),
                    case.dice[i],
                    hd,
                    defined
                ));
            }
        }
        out
    }

    /// Aligned text table in the reporting row order, one row per class plus
    /// an Overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>8} {:>12}\n", "", "Dice", "HD95 (mm)"));
        for s in &self.per_class {
            let hd = match s.mean_hd95_mm {
                Some(v) => format!("{v:.3}"),
                None => "n/a".to_string(),
            };
            let flag = if s.hd95_undefined_cases > 0 {
                format!(" ({} undefined)", s.hd95_undefined_cases)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{:<12} {:>8.3} {:>12}{}\n",
                class_name(s.class),
                s.mean_dice,
                hd,
                flag
            ));
        }
        let hd = match self.overall_hd95_mm {
            Some(v) => format!("{v:.3}"),
            None => "n/a".to_string(),
        };
        out.push_str(&format!("{:<12} {:>8.3} {:>12}\n", "Overall", self.overall_dice, hd));
        out
    }
}
