use std::path::Path;

use anyhow::Context;
use ctxforest_core::cascade::CascadeConfig;
use ctxforest_core::phantom::PhantomSpec;
use ctxforest_core::{EnergyParams, FeatureConfig, ForestConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything a run can be configured with. Paths come from flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub cascade: CascadeConfig,
    pub energy: EnergyParams,
    pub phantom: PhantomSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Published forest size (60 trees, depth 18, 100 × 10 candidates).
    Full,
    /// Smaller forests for single-machine phantom experiments.
    Desk,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = match p {
            Preset::Full => PipelineConfig::default(),
            Preset::Desk => PipelineConfig::desk(),
        };
        RunConfig {
            seed: base.seed,
            features: base.features,
            forest: base.forest,
            cascade: base.cascade,
            energy: base.energy,
            phantom: PhantomSpec::default(),
        }
    }

    /// Starts from `preset` and overlays the keys present in a TOML file.
    pub fn load(path: Option<&Path>, preset: Preset) -> anyhow::Result<Self> {
        let base = RunConfig::preset(preset);
        let Some(path) = path else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).map_err(|e| ctxforest_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let overlay: toml::Table = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let mut merged = toml::Table::try_from(&base).context("serialising preset")?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            features: self.features.clone(),
            forest: self.forest.clone(),
            cascade: self.cascade.clone(),
            energy: self.energy.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Logs the resolved configuration and writes it next to an artifact.
    pub fn record(&self, path: &Path) -> anyhow::Result<()> {
        let text = self.to_toml();
        log::info!("resolved configuration:\n{text}");
        std::fs::write(path, text).map_err(|e| ctxforest_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[forest]\nnum_trees = 3\n").unwrap();
        let cfg = RunConfig::load(Some(&p), Preset::Desk).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.forest.num_trees, 3);
        assert_eq!(cfg.forest.max_depth, PipelineConfig::desk().forest.max_depth);

        std::fs::write(&p, "[forest]\nnum_tree = 3\n").unwrap();
        let err = RunConfig::load(Some(&p), Preset::Desk).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset(Preset::Full);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
