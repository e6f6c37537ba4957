//! Combined configuration of a full pipeline run.

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeConfig;
use crate::features::FeatureConfig;
use crate::forest::ForestConfig;
use crate::graphcut::EnergyParams;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub cascade: CascadeConfig,
    pub energy: EnergyParams,
}

impl PipelineConfig {
    /// Smaller forests and sample caps that keep 64³ phantom experiments
    /// within minutes on a single core.
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 0,
            features: FeatureConfig {
                pool_size: 60,
                ..FeatureConfig::default()
            },
            forest: ForestConfig {
                num_trees: 24,
                max_depth: 16,
                ..ForestConfig::default()
            },
            cascade: CascadeConfig {
                samples_per_class_per_volume: 1500,
                ..CascadeConfig::default()
            },
            energy: EnergyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.forest.validate()?;
        self.cascade.validate()?;
        self.energy.validate()
    }
}
