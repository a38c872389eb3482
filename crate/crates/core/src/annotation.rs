//! Label-scheme handling: sparse-slice ignore masks, ROI retention with
//! dilation, and WMH/PVS label merging.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Mask, Volume, BACKGROUND, BG_PVS, IGNORE, WMH, WM_PVS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub class_ids: BTreeMap<String, u8>,
    /// Classes averaged by the dice term, in order.
    pub foreground_ids: Vec<u8>,
}

impl LabelScheme {
    /// Background, WM-PVS and BG-PVS.
    pub fn pvs() -> Self {
        Self::build(&[("wm_pvs", WM_PVS), ("bg_pvs", BG_PVS)])
    }

    /// PVS classes plus white-matter hyperintensities.
    pub fn pvs_with_wmh() -> Self {
        Self::build(&[("wm_pvs", WM_PVS), ("bg_pvs", BG_PVS), ("wmh", WMH)])
    }

    fn build(fg: &[(&str, u8)]) -> Self {
        let mut class_ids = BTreeMap::new();
        class_ids.insert("background".to_string(), BACKGROUND);
        class_ids.insert("ignore".to_string(), IGNORE);
        for (name, id) in fg {
            class_ids.insert(name.to_string(), *id);
        }
        LabelScheme {
            class_ids,
            foreground_ids: fg.iter().map(|(_, id)| *id).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u8> = self.class_ids.values().copied().collect();
        if ids.len() != self.class_ids.len() {
            return Err(Error::InvalidArgument("label scheme ids must be distinct".into()));
        }
        if self.class_ids.get("background") != Some(&BACKGROUND) {
            return Err(Error::InvalidArgument("background must have id 0".into()));
        }
        if self.class_ids.get("ignore") != Some(&IGNORE) {
            return Err(Error::InvalidArgument("ignore must have id 255".into()));
        }
        for id in &self.foreground_ids {
            if *id == IGNORE || *id == BACKGROUND || !ids.contains(id) {
                return Err(Error::InvalidArgument(format!(
                    "foreground id {id} must be a declared non-background, non-ignore class"
                )));
            }
        }
        Ok(())
    }

    /// Number of network output channels: every id from 0 to the largest
    /// non-ignore class.
    pub fn num_classes(&self) -> usize {
        self.class_ids
            .values()
            .filter(|&&id| id != IGNORE)
            .max()
            .map_or(1, |&m| m as usize + 1)
    }
}

impl Default for LabelScheme {
    fn default() -> Self {
        LabelScheme::pvs()
    }
}

/// Axial slices that carry manual labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseAnnotation {
    pub annotated_slices: BTreeSet<usize>,
    /// Index of the axial axis (2 for the usual RAS-like storage order).
    pub axis: usize,
}

impl SparseAnnotation {
    pub fn new(slices: impl IntoIterator<Item = usize>, axis: usize) -> Self {
        SparseAnnotation {
            annotated_slices: slices.into_iter().collect(),
            axis,
        }
    }
}

/// Marks every voxel on a non-annotated slice as ignore (255).
pub fn apply_sparse_ignore(labels: &LabelMap, ann: &SparseAnnotation) -> Result<LabelMap> {
    if ann.axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {} out of range", ann.axis)));
    }
    let n = labels.dims()[ann.axis];
    if let Some(&bad) = ann.annotated_slices.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidArgument(format!(
            "annotated slice {bad} out of range for {n} slices"
        )));
    }
    let mut out = labels.clone();
    for (idx, v) in out.data.iter_mut().enumerate() {
        let c = labels.grid.coords(idx);
        if !ann.annotated_slices.contains(&c[ann.axis]) {
            *v = IGNORE;
        }
    }
    Ok(out)
}

/// One dilation step with the full 3x3x3 structuring element.
pub fn dilate(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.dims;
    let mut out = mask.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.data[x + nx * (y + ny * z)] {
                    continue;
                }
                for zz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                    for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                            out.data[xx + nx * (yy + ny * zz)] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Selected parcellation ids, dilated `iters` times.
pub fn roi_mask(parcellation: &Parcellation, keep_ids: &BTreeSet<u32>, iters: usize) -> Result<Mask> {
    let mut mask = Mask {
        dims: parcellation.grid.dims,
        data: parcellation.data.iter().map(|v| keep_ids.contains(v)).collect(),
    };
    if mask.count() == 0 {
        return Err(Error::Degenerate(format!(
            "no parcellation voxel carries any of the ids {keep_ids:?}"
        )));
    }
    for _ in 0..iters {
        mask = dilate(&mask);
    }
    Ok(mask)
}

/// Zeroes the image outside the dilated ROI.
///
/// Parcellation maps use atlas ids rather than the PVS label set, so they are
/// passed as raw ids on the image lattice.
pub fn roi_retain(
    vol: &Volume,
    parcellation: &Parcellation,
    keep_ids: &BTreeSet<u32>,
    dilate_iters: usize,
) -> Result<Volume> {
    vol.grid.ensure_matches(&parcellation.grid, "parcellation")?;
    let mask = roi_mask(parcellation, keep_ids, dilate_iters)?;
    let mut out = vol.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask.data) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Integer atlas map (e.g. a FreeSurfer-style parcellation).
#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    pub grid: crate::volume::Grid,
    pub data: Vec<u32>,
}

impl Parcellation {
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(vol.data.len());
        for &v in &vol.data {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "parcellation value {v} is not a non-negative integer"
                )));
            }
            data.push(v as u32);
        }
        Ok(Parcellation {
            grid: vol.grid.clone(),
            data,
        })
    }
}

/// Overrides PVS labels with WMH (3) where the WMH probability exceeds
/// `threshold`. Ignore voxels are never touched.
pub fn merge_wmh(pvs: &LabelMap, wmh_probability: &Volume, threshold: f64) -> Result<LabelMap> {
    pvs.grid.ensure_matches(&wmh_probability.grid, "wmh probability map")?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "wmh threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let data = pvs
        .data
        .iter()
        .zip(&wmh_probability.data)
        .map(|(&l, &p)| if l != IGNORE && p as f64 > threshold { WMH } else { l })
        .collect();
    Ok(LabelMap {
        grid: pvs.grid.clone(),
        data,
    })
}
