//! Pseudo-label generation and merging into training folds.

use std::collections::BTreeSet;
use std::path::Path;

use pvseg_core::manifest::{CaseEntry, Provenance};
use pvseg_core::nifti::write_labels;

use crate::data::load_channels;
use crate::error::{NetError, Result};
use crate::infer::infer;
use crate::model::NetModel;

#[derive(Debug, Clone, Default)]
pub struct PseudoOutcome {
    /// New manifest entries flagged as pseudo-labelled.
    pub entries: Vec<CaseEntry>,
    /// Cases that failed, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Fails when any case's channel count differs from the model's.
pub fn check_channels(model: &NetModel, cases: &[CaseEntry]) -> Result<()> {
    for c in cases {
        if c.channels() != model.cfg.in_channels {
            return Err(NetError::Shape(format!(
                "case {} has {} channel(s), the model expects {}",
                c.id,
                c.channels(),
                model.cfg.in_channels
            )));
        }
    }
    Ok(())
}

/// Predicts every case, writes `{out_dir}/{id}.nii.gz` and returns entries
/// pointing at the predictions. Per-case failures are collected, not fatal.
pub fn pseudo_label_round(model: &NetModel, unlabeled: &[CaseEntry], out_dir: &Path) -> Result<PseudoOutcome> {
    check_channels(model, unlabeled)?;
    if unlabeled.is_empty() {
        return Ok(PseudoOutcome::default());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| NetError::io(out_dir, e))?;
    let mut out = PseudoOutcome::default();
    for case in unlabeled {
        let path = out_dir.join(format!("{}.nii.gz", case.id));
        let result = load_channels(case)
            .and_then(|ch| infer(model, &ch))
            .and_then(|labels| Ok(write_labels(&labels, &path)?));
        match result {
            Ok(()) => {
                let mut e = case.clone();
                e.labels = Some(path);
                e.annotated_slices = None;
                e.provenance = Provenance::Pseudo;
                out.entries.push(e);
            }
            Err(err) => out.failures.push((case.id.clone(), err.to_string())),
        }
    }
    Ok(out)
}

/// Union of a fold's gold training cases and pseudo-labelled cases. Ids must
/// be unique across both, and no validation case may enter either set.
pub fn merge_training_set(
    gold: &[CaseEntry],
    pseudo: &[CaseEntry],
    validation_ids: &BTreeSet<String>,
) -> Result<Vec<CaseEntry>> {
    let mut seen = BTreeSet::new();
    for c in gold.iter().chain(pseudo) {
        if validation_ids.contains(&c.id) {
            return Err(NetError::Config(format!(
                "case {} is a validation case and cannot be used for training",
                c.id
            )));
        }
        if !seen.insert(c.id.as_str()) {
            return Err(NetError::Config(format!("case id {} appears twice in the training set", c.id)));
        }
    }
    Ok(gold.iter().chain(pseudo).cloned().collect())
}
