use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// Widest feature map in the encoder.
pub const MAX_CHANNELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output classes including background.
    pub num_classes: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub patch_size: [usize; 3],
    pub blocks_per_stage: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 3,
            stages: 4,
            base_channels: 8,
            patch_size: [32, 32, 32],
            blocks_per_stage: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("stages", self.stages),
            ("base_channels", self.base_channels),
            ("blocks_per_stage", self.blocks_per_stage),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be positive")));
            }
        }
        if self.stages > 16 {
            return Err(NetError::Config(format!("stages = {} is unreasonably deep", self.stages)));
        }
        let div = 1usize << (self.stages - 1);
        if self.patch_size.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(NetError::Config(format!(
                "patch_size {:?} must be positive and divisible by 2^(stages-1) = {div}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Feature channels at encoder stage `s`.
    pub fn channels(&self, s: usize) -> usize {
        (self.base_channels << s.min(16)).min(MAX_CHANNELS.max(self.base_channels))
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.iter().product()
    }
}
