//! Run configuration shared by every pipeline command.
//!
//! Sections mirror the pipeline stages. All randomness is derived from the
//! single global `seed` by [`RunConfig::resolve`], so per-section seeds in a
//! file are overwritten and shown in the resolved echo.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::catalog::SyntheticConfig;
use crate::error::{Error, Result};
use crate::experiment::{OracleSettings, WorldConfig};
use crate::extractor::ExtractorConfig;
use crate::recommender::{Hyperparams, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub extractor: ExtractorConfig,
    pub model: ModelSection,
    pub oracle: OracleSettings,
    pub attack: AttackConfig,
    pub scenarios: ScenarioSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Synthetic(SyntheticConfig),
    Files {
        interactions: PathBuf,
        images: PathBuf,
        #[serde(default = "one")]
        min_interactions: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hyper: Hyperparams,
    /// Seed of the train/validation split.
    pub split_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        ModelSection {
            kind: w.model,
            hyper: w.hyper,
            split_seed: w.split_seed,
        }
    }
}

/// Sampled scenarios, used when no scenario file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection { count: 100, seed: 99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub ks: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            ks: vec![1, 10, 20],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            dataset: DatasetSection::default(),
            extractor: ExtractorConfig::default(),
            model: ModelSection::default(),
            oracle: OracleSettings::default(),
            attack: AttackConfig::default(),
            scenarios: ScenarioSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn derive(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    // 63 bits, so seeds survive formats with signed integers
    (z ^ (z >> 31)) >> 1
}

impl RunConfig {
    /// Copy with every component seed derived from the global seed.
    pub fn resolve(&self) -> RunConfig {
        let mut c = self.clone();
        if let DatasetSection::Synthetic(s) = &mut c.dataset {
            s.seed = derive(c.seed, 1);
        }
        c.extractor.seed = derive(c.seed, 2);
        c.model.hyper.seed = derive(c.seed, 3);
        c.model.split_seed = derive(c.seed, 4);
        c.scenarios.seed = derive(c.seed, 5);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.attack.validate()?;
        if self.report.ks.is_empty() || self.report.ks.contains(&0) {
            return Err(Error::InvalidArgument("report.ks must be non-empty and >= 1".into()));
        }
        if self.scenarios.count == 0 {
            return Err(Error::InvalidArgument("scenarios.count must be >= 1".into()));
        }
        if let DatasetSection::Synthetic(s) = &self.dataset {
            if s.image_side != self.extractor.input_height || s.image_side != self.extractor.input_width {
                return Err(Error::InvalidArgument(
                    "dataset.image_side must match the extractor input size".into(),
                ));
            }
        }
        Ok(())
    }

    /// Seed of scenario `index` of an attack batch.
    pub fn scenario_seed(&self, index: usize) -> u64 {
        derive(self.seed, 1000 + index as u64)
    }

    pub fn world_config(&self) -> Option<WorldConfig> {
        match &self.dataset {
            DatasetSection::Synthetic(s) => Some(WorldConfig {
                dataset: s.clone(),
                extractor: self.extractor.clone(),
                model: self.model.kind,
                hyper: self.model.hyper.clone(),
                split_seed: self.model.split_seed,
            }),
            DatasetSection::Files { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_is_a_function_of_the_global_seed() {
        let mut a = RunConfig::default();
        a.extractor.seed = 5;
        let b = RunConfig::default();
        assert_eq!(a.resolve(), b.resolve());
        let mut c = RunConfig::default();
        c.seed = 43;
        assert_ne!(c.resolve().extractor.seed, b.resolve().extractor.seed);
        assert_eq!(b.resolve().resolve(), b.resolve());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = RunConfig::default().resolve();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sedd": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"attack": {"epsilonn": 1}}"#).is_err());
        let files: RunConfig =
            serde_json::from_str(r#"{"dataset": {"source": "files", "interactions": "a.csv", "images": "img"}}"#)
                .unwrap();
        assert!(matches!(files.dataset, DatasetSection::Files { min_interactions: 1, .. }));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.report.ks = vec![0];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.attack.max_steps = 21;
        assert!(c.validate().is_err());
    }
}
