use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnStats, BnState};

/// Architecture and initialization settings for a MiniNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// Channel width of stage 1; doubles each stage.
    pub base_channels: usize,
    pub num_classes: usize,
    /// Square input side length; must be divisible by `2^stages`.
    pub input_size: usize,
    pub in_channels: usize,
    pub init_seed: u64,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let bn = BnState::new(1).stats;
        Self {
            stages: 4,
            blocks_per_stage: 1,
            base_channels: 8,
            num_classes: 7,
            input_size: 32,
            in_channels: 3,
            init_seed: 0,
            bn_momentum: bn.momentum,
            bn_epsilon: bn.epsilon,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("blocks_per_stage", self.blocks_per_stage),
            ("base_channels", self.base_channels),
            ("num_classes", self.num_classes),
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stages >= usize::BITS as usize - 1 || self.stages > 16 {
            return Err(Error::Config(format!("stages {} too large", self.stages)));
        }
        let factor = 1usize << self.stages;
        if self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^stages = {factor}",
                self.input_size
            )));
        }
        if self.base_channels.checked_shl(self.stages as u32 - 1).is_none_or(|c| c > 1 << 16) {
            return Err(Error::Config("channel count overflow".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!("bn_momentum {} outside (0, 1)", self.bn_momentum)));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return Err(Error::Config(format!("bn_epsilon {} must be positive", self.bn_epsilon)));
        }
        Ok(())
    }

    /// Output channels of a 1-based stage.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Stage index assigned to the classifier head.
    pub fn head_stage(&self) -> usize {
        self.stages + 1
    }

    pub(crate) fn new_bn_stats(&self, channels: usize) -> BnStats {
        BnStats::new(channels, self.bn_momentum, self.bn_epsilon)
    }
}
