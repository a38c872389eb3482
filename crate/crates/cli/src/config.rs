//! The pipeline configuration file and its fingerprints.

use std::path::Path;

use pvseg_core::annotation::LabelScheme;
use pvseg_core::eval::Bootstrap;
use pvseg_core::manifest::{canonical_json, Manifest};
use pvseg_core::morphology::Connectivity;
use pvseg_core::preprocess::PreprocessConfig;
use pvseg_net::augment::AugmentConfig;
use pvseg_net::{NetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub connectivity: Connectivity,
    pub k_folds: usize,
    pub bootstrap: Bootstrap,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            connectivity: Connectivity::TwentySix,
            k_folds: 5,
            bootstrap: Bootstrap::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Spacing policy, enhancement chain, ROI and WMH handling.
    pub preprocess: PreprocessConfig,
    pub label_scheme: LabelScheme,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    /// Reads a JSON config; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: PipelineConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Invalid(format!("config {}: {e}", p.display())))?
            }
            None => PipelineConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: String| CliError::Invalid(e);
        self.preprocess.validate().map_err(|e| invalid(e.to_string()))?;
        self.label_scheme.validate().map_err(|e| invalid(e.to_string()))?;
        self.net.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| invalid(e.to_string()))?;
        if self.net.num_classes != self.label_scheme.num_classes() {
            return Err(invalid(format!(
                "net.num_classes is {} but the label scheme defines {} classes",
                self.net.num_classes,
                self.label_scheme.num_classes()
            )));
        }
        if self.eval.k_folds < 2 {
            return Err(invalid("eval.k_folds must be at least 2".into()));
        }
        if self.eval.bootstrap.n_resamples == 0 {
            return Err(invalid("eval.bootstrap.n_resamples must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON of the whole configuration.
    pub fn fingerprint(&self) -> String {
        sha256_hex(canonical_json(self).expect("config serializes").as_bytes())
    }

    /// Hash of the preprocessing section alone.
    pub fn preprocess_fingerprint(&self) -> String {
        sha256_hex(canonical_json(&self.preprocess).expect("config serializes").as_bytes())
    }

    /// The network's input channel count must match every case.
    pub fn check_channels(&self, manifest: &Manifest) -> Result<()> {
        for c in &manifest.cases {
            if c.channels() != self.net.in_channels {
                return Err(CliError::Invalid(format!(
                    "case {} has {} channel(s) but net.in_channels is {}",
                    c.id,
                    c.channels(),
                    self.net.in_channels
                )));
            }
        }
        Ok(())
    }
}
