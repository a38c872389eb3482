use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{LabelMap, BACKGROUND, IGNORE};

/// Voxel counts for one class over the non-ignored voxels of the reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn count_by(pred: &LabelMap, reference: &LabelMap, is_class: impl Fn(u8) -> bool) -> Result<ConfusionCounts> {
    pred.grid.ensure_matches(&reference.grid, "prediction vs reference")?;
    let mut c = ConfusionCounts::default();
    for (&p, &r) in pred.data.iter().zip(&reference.data) {
        if r == IGNORE {
            continue;
        }
        match (is_class(p), is_class(r)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Confusion counts for `class_id`; voxels whose reference is ignore are
/// skipped entirely.
pub fn confusion(pred: &LabelMap, reference: &LabelMap, class_id: u8) -> Result<ConfusionCounts> {
    count_by(pred, reference, |v| v == class_id)
}

/// Confusion counts treating every non-background class as one.
pub fn confusion_any_foreground(pred: &LabelMap, reference: &LabelMap) -> Result<ConfusionCounts> {
    count_by(pred, reference, |v| v != BACKGROUND && v != IGNORE)
}

/// DSC, sensitivity and PPV; `None` marks an undefined (0/0) value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dsc: Option<f64>,
    pub sen: Option<f64>,
    pub ppv: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn dsc_sen_ppv(c: &ConfusionCounts) -> OverlapMetrics {
    OverlapMetrics {
        dsc: ratio(2 * c.tp, (c.tp + c.fp) + (c.tp + c.fn_)),
        sen: ratio(c.tp, c.tp + c.fn_),
        ppv: ratio(c.tp, c.tp + c.fp),
    }
}
