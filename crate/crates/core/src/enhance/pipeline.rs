use super::{adaptive_hist_eq, estimate_sigma, nlm::nlm_filter_with_sigma, EnhanceConfig, EnhanceFlag, Sigma};
use crate::error::Result;
use crate::intensity::{otsu_foreground, rescale_unit};
use crate::volume::{Mask, Volume};

/// Output of the enhancement chain together with the foreground it kept.
#[derive(Debug, Clone)]
pub struct Enhanced {
    pub volume: Volume,
    pub foreground: Mask,
    /// Noise level used by NLM, in rescaled intensity units.
    pub sigma: Option<f64>,
}

fn zero_outside(vol: &mut Volume, mask: &Mask) {
    for (v, &m) in vol.data.iter_mut().zip(&mask.data) {
        if !m {
            *v = 0.0;
        }
    }
}

/// Otsu background removal, rescaling to `[0, 1]` over the foreground, then
/// NLM and AHE when flagged (always in that order). Background stays 0.
pub fn enhance_pipeline(vol: &Volume, cfg: &EnhanceConfig) -> Result<Volume> {
    enhance_pipeline_with_mask(vol, cfg).map(|e| e.volume)
}

pub fn enhance_pipeline_with_mask(vol: &Volume, cfg: &EnhanceConfig) -> Result<Enhanced> {
    cfg.validate()?;
    let otsu = otsu_foreground(vol)?;
    let mask = otsu.mask;
    let mut out = rescale_unit(vol, Some(&mask))?;
    let mut sigma_used = None;

    if cfg.has(EnhanceFlag::Nlmf) {
        let sigma = match cfg.nlm_sigma {
            Sigma::Fixed(s) => s,
            Sigma::Auto => {
                // measured on the raw background, expressed in rescaled units
                let raw = estimate_sigma(vol, &mask.not())?;
                let (lo, hi) = vol.masked_min_max(Some(&mask)).expect("non-empty foreground");
                raw / (hi as f64 - lo as f64)
            }
        };
        out = nlm_filter_with_sigma(&out, cfg.nlm_patch_radius, cfg.nlm_block_radius, sigma)?;
        zero_outside(&mut out, &mask);
        sigma_used = Some(sigma);
    }
    if cfg.has(EnhanceFlag::Ahe) {
        out = adaptive_hist_eq(&out, cfg)?;
        zero_outside(&mut out, &mask);
    }
    Ok(Enhanced {
        volume: out,
        foreground: mask,
        sigma: sigma_used,
    })
}
