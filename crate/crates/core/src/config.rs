//! The JSON run configuration read by the CLI. Every field has a default
//! and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::side::SideConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Tap gap used at extraction; every run's `gap` must be a multiple.
    pub gap: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { gap: 1 }
    }
}

/// Grid for `sweep`: the cartesian product of the listed values, every
/// other side field taken from the `side` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Worker threads when neither `--concurrency` nor `LAST_THREADS` is
    /// set; 0 means 1.
    pub concurrency: usize,
    pub gaps: Vec<usize>,
    pub stacks: Vec<usize>,
    pub ranks: Vec<usize>,
    pub heads: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            concurrency: 0,
            gaps: vec![1, 2],
            stacks: vec![1, 2, 3],
            ranks: vec![],
            heads: vec![],
            seeds: vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub side: SideConfig,
    pub train: TrainConfig,
    pub cache: CacheConfig,
    pub sweep: SweepConfig,
    pub memory: MemoryConfig,
    /// The synthetic task used by `gen-data` and the in-memory presets.
    pub data: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.side.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "side.num_classes {} differs from data.num_classes {}",
                self.side.num_classes, self.data.num_classes
            )));
        }
        self.side.validate(&self.backbone)?;
        if self.cache.gap == 0 || !self.backbone.depth.is_multiple_of(self.cache.gap) {
            return Err(Error::Config(format!(
                "cache.gap {} must divide depth {}",
                self.cache.gap, self.backbone.depth
            )));
        }
        if !self.side.gap.is_multiple_of(self.cache.gap) {
            return Err(Error::Config(format!(
                "side.gap {} is not a multiple of cache.gap {}",
                self.side.gap, self.cache.gap
            )));
        }
        for &g in &self.sweep.gaps {
            if g == 0 || g % self.cache.gap != 0 || !self.backbone.depth.is_multiple_of(g) {
                return Err(Error::Config(format!(
                    "sweep gap {g} must divide depth {} and be a multiple of cache.gap {}",
                    self.backbone.depth, self.cache.gap
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sid": {}}"#,
            r#"{"side": {"rnak": 4}}"#,
            r#"{"memory": {"batch": 1, "x": 0}}"#,
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{doc}");
        }
    }

    #[test]
    fn run_gap_must_be_multiple_of_cache_gap() {
        let err = RunConfig::from_json(r#"{"cache": {"gap": 2}, "side": {"gap": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("multiple"));
    }

    #[test]
    fn defaults_roundtrip_through_json() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }
}
