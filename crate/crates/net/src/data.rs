//! Loading manifest cases into memory for training and inference.

use pvseg_core::annotation::{apply_sparse_ignore, SparseAnnotation};
use pvseg_core::manifest::CaseEntry;
use pvseg_core::nifti::{read_labels, read_volume};
use pvseg_core::Volume;

use crate::error::{NetError, Result};
use crate::ops::Act;
use crate::sampling::TrainCase;

/// Axis along which sparse annotations select slices.
pub const SPARSE_AXIS: usize = 2;

/// The image channels of a case: the primary image, then `image2` if present.
pub fn load_channels(entry: &CaseEntry) -> Result<Vec<Volume>> {
    let mut out = vec![read_volume(&entry.image)?];
    if let Some(p) = &entry.image2 {
        let v = read_volume(p)?;
        out[0].grid.ensure_matches(&v.grid, &format!("case {} image2", entry.id))?;
        out.push(v);
    }
    Ok(out)
}

pub fn channels_to_act(channels: &[Volume]) -> Act {
    let dims = channels[0].dims();
    let data = channels.iter().flat_map(|v| v.data.iter().map(|&x| x as f64)).collect();
    Act {
        c: channels.len(),
        dims,
        data,
    }
}

/// Reads image channels and labels, applying the sparse-annotation ignore
/// mask when the entry lists annotated slices.
pub fn load_train_case(entry: &CaseEntry) -> Result<TrainCase> {
    let channels = load_channels(entry)?;
    let path = entry
        .labels
        .as_ref()
        .ok_or_else(|| NetError::Degenerate(format!("case {} has no labels", entry.id)))?;
    let mut labels = read_labels(path)?;
    channels[0].grid.ensure_matches(&labels.grid, &format!("case {} labels", entry.id))?;
    if let Some(slices) = &entry.annotated_slices {
        labels = apply_sparse_ignore(&labels, &SparseAnnotation::new(slices.iter().copied(), SPARSE_AXIS))?;
    }
    TrainCase::new(entry.id.clone(), channels_to_act(&channels), labels.data)
}
