//! Run configuration: one JSON file covering every stage, plus flag
//! overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use partfield::dataset::InstanceSplit;
use partfield::env::{EnvConfig, Split};
use partfield::field::TrainConfig;
use partfield::geometry::{Category, PoseRanges};
use partfield::policy::{PolicyConfig, SamplerMode};
use partfield::rng;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub categories: Vec<String>,
    pub instances: usize,
    pub points: usize,
    pub split: InstanceSplit,
    pub pose_ranges: PoseRanges,
    pub k_neighbors: usize,
    pub codebook_seed: u64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            categories: Category::SEEN.iter().map(|c| c.name().to_string()).collect(),
            instances: 40,
            points: partfield::dataset::DEFAULT_POINTS,
            split: InstanceSplit::Train,
            pose_ranges: PoseRanges::default(),
            k_neighbors: partfield::descriptors::DEFAULT_K_NEIGHBORS,
            codebook_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub splits: Vec<Split>,
    /// Rollouts per split and seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub sampler: SamplerMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: Split::ALL.to_vec(),
            episodes: 10,
            seeds: (0..5).collect(),
            sampler: SamplerMode::DdimDeterministic,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the dataset seed and derives the field and policy
    /// seeds from it.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub field: TrainConfig,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Fans the global seed out to the per-stage seeds.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.seed = seed;
        self.field.seed = rng::derive(seed, "field");
        self.policy.seed = rng::derive(seed, "policy");
    }

    pub fn categories(&self) -> Result<Vec<Category>, CliError> {
        self.dataset
            .categories
            .iter()
            .map(|c| c.parse::<Category>().map_err(|e| CliError::Usage(e.to_string())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: partfield::Error| CliError::Usage(e.to_string());
        if self.dataset.categories.is_empty() {
            return Err(CliError::Usage("dataset.categories is empty".into()));
        }
        self.categories()?;
        if self.dataset.instances == 0 {
            return Err(CliError::Usage("dataset.instances must be positive".into()));
        }
        if self.dataset.points <= self.dataset.k_neighbors {
            return Err(CliError::Usage(format!(
                "dataset.points ({}) must exceed dataset.k_neighbors ({})",
                self.dataset.points, self.dataset.k_neighbors
            )));
        }
        self.dataset.pose_ranges.validate().map_err(usage)?;
        self.field.validate().map_err(usage)?;
        self.policy.validate().map_err(usage)?;
        self.env.validate().map_err(usage)?;
        if self.policy.horizon != self.env.horizon {
            return Err(CliError::Usage(format!(
                "policy.horizon ({}) and env.horizon ({}) differ",
                self.policy.horizon, self.env.horizon
            )));
        }
        if self.eval.splits.is_empty() || self.eval.seeds.is_empty() || self.eval.episodes == 0 {
            return Err(CliError::Usage("eval needs splits, seeds and a positive episode count".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"field": {"stepz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"field": {"loss": {"enable_sem": false}}}"#).unwrap();
        assert!(!c.field.loss.enable_sem);
        assert_eq!(c.field.steps, TrainConfig::default().steps);
    }

    #[test]
    fn global_seed_fans_out() {
        let mut a = RunConfig::default();
        a.apply_seed(7);
        let mut b = RunConfig::default();
        b.apply_seed(8);
        assert_eq!(a.dataset.seed, 7);
        assert_ne!(a.field.seed, b.field.seed);
        assert_ne!(a.field.seed, a.policy.seed);
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let mut c = RunConfig::default();
        c.policy.horizon = 8;
        assert!(c.validate().is_err());
    }
}
