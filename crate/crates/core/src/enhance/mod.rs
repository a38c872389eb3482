//! Image enhancement: non-local means denoising, 3D contrast-limited
//! adaptive histogram equalisation, and the composed enhancement chain.

mod ahe;
mod nlm;
mod pipeline;

pub use ahe::adaptive_hist_eq;
pub use nlm::{estimate_sigma, nlm_filter};
pub use pipeline::{enhance_pipeline, enhance_pipeline_with_mask, Enhanced};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise level for the NLM weights: a fixed value, or estimated from the
/// background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnhanceFlag {
    Nlmf,
    Ahe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub nlm_patch_radius: usize,
    pub nlm_block_radius: usize,
    pub nlm_sigma: Sigma,
    /// Tile size per axis; `None` derives `max(dims / 8, 4)` per axis.
    pub ahe_kernel: Option<[usize; 3]>,
    pub ahe_clip_limit: f64,
    pub pipeline_flags: Vec<EnhanceFlag>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            nlm_patch_radius: 1,
            nlm_block_radius: 2,
            nlm_sigma: Sigma::Auto,
            ahe_kernel: None,
            ahe_clip_limit: 0.01,
            pipeline_flags: Vec::new(),
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nlm_block_radius == 0 || self.nlm_block_radius < self.nlm_patch_radius {
            return Err(Error::InvalidArgument(format!(
                "nlm block radius {} must be positive and >= patch radius {}",
                self.nlm_block_radius, self.nlm_patch_radius
            )));
        }
        if let Sigma::Fixed(s) = self.nlm_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("nlm sigma must be positive, got {s}")));
            }
        }
        if !(self.ahe_clip_limit > 0.0 && self.ahe_clip_limit <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ahe clip limit must lie in (0, 1], got {}",
                self.ahe_clip_limit
            )));
        }
        if let Some(k) = self.ahe_kernel {
            if k.contains(&0) {
                return Err(Error::InvalidArgument("ahe kernel must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn has(&self, flag: EnhanceFlag) -> bool {
        self.pipeline_flags.contains(&flag)
    }

    pub fn ahe_kernel_for(&self, dims: [usize; 3]) -> [usize; 3] {
        self.ahe_kernel
            .unwrap_or_else(|| dims.map(|d| (d / 8).max(4).min(d)))
    }
}
