//! Per-case preprocessing: spacing policy, optional ROI retention, the
//! enhancement chain, and z-score normalisation unless AHE was applied.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::annotation::{merge_wmh, roi_retain, Parcellation};
use crate::enhance::{enhance_pipeline_with_mask, EnhanceConfig, EnhanceFlag};
use crate::error::{Error, Result};
use crate::intensity::clip_zscore;
use crate::resample::{resample_labels, resample_volume, Interp, SpacingPolicy};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    pub keep_ids: BTreeSet<u32>,
    pub dilate_iters: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            keep_ids: BTreeSet::new(),
            dilate_iters: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub spacing_policy: SpacingPolicy,
    pub enhance: EnhanceConfig,
    /// Z-score statistics over the Otsu foreground instead of the whole volume.
    pub zscore_foreground: bool,
    /// Applied only to cases that carry a parcellation.
    pub roi: Option<RoiConfig>,
    /// Merge thresholded WMH maps into the labels as class 3.
    pub merge_wmh: bool,
    pub wmh_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            spacing_policy: SpacingPolicy::Agnostic,
            enhance: EnhanceConfig::default(),
            zscore_foreground: true,
            roi: None,
            merge_wmh: false,
            wmh_threshold: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.spacing_policy.validate()?;
        self.enhance.validate()?;
        if !(self.wmh_threshold > 0.0 && self.wmh_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "wmh threshold must lie in (0, 1), got {}",
                self.wmh_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CaseInputs {
    pub image: Option<Volume>,
    pub image2: Option<Volume>,
    pub labels: Option<LabelMap>,
    /// Integer atlas map stored as a float volume.
    pub parcellation: Option<Volume>,
    pub wmh: Option<Volume>,
}

#[derive(Debug, Clone)]
pub struct CaseOutputs {
    pub image: Volume,
    pub image2: Option<Volume>,
    pub labels: Option<LabelMap>,
}

/// Intensity chain on an image already on its output lattice.
pub fn normalize_intensity(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let enhanced = enhance_pipeline_with_mask(vol, &cfg.enhance)?;
    if cfg.enhance.has(EnhanceFlag::Ahe) {
        return Ok(enhanced.volume);
    }
    let mask = cfg.zscore_foreground.then_some(&enhanced.foreground);
    clip_zscore(&enhanced.volume, mask)
}

/// Full per-case chain. Images are resampled trilinearly, labels and
/// parcellations by nearest neighbour.
pub fn preprocess_case(inputs: &CaseInputs, cfg: &PreprocessConfig) -> Result<CaseOutputs> {
    cfg.validate()?;
    let image = inputs
        .image
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("case has no image".into()))?;
    let policy = &cfg.spacing_policy;
    let mut img = resample_volume(image, policy, Interp::Trilinear)?;
    let mut img2 = match &inputs.image2 {
        Some(v) => {
            image.grid.ensure_matches(&v.grid, "second channel")?;
            Some(resample_volume(v, policy, Interp::Trilinear)?)
        }
        None => None,
    };

    if let (Some(roi), Some(parc)) = (&cfg.roi, &inputs.parcellation) {
        image.grid.ensure_matches(&parc.grid, "parcellation")?;
        let parc = Parcellation::from_volume(&resample_volume(parc, policy, Interp::Nearest)?)?;
        img = roi_retain(&img, &parc, &roi.keep_ids, roi.dilate_iters)?;
        if let Some(v) = img2.take() {
            img2 = Some(roi_retain(&v, &parc, &roi.keep_ids, roi.dilate_iters)?);
        }
    }

    let image_out = normalize_intensity(&img, cfg)?;
    let image2_out = img2.map(|v| normalize_intensity(&v, cfg)).transpose()?;

    let labels = match &inputs.labels {
        Some(l) => {
            image.grid.ensure_matches(&l.grid, "labels")?;
            let mut l = resample_labels(l, policy, Interp::Nearest)?;
            if cfg.merge_wmh {
                if let Some(w) = &inputs.wmh {
                    image.grid.ensure_matches(&w.grid, "wmh map")?;
                    let w = resample_volume(w, policy, Interp::Trilinear)?;
                    l = merge_wmh(&l, &w, cfg.wmh_threshold)?;
                }
            }
            Some(l)
        }
        None => None,
    };
    Ok(CaseOutputs {
        image: image_out,
        image2: image2_out,
        labels,
    })
}
