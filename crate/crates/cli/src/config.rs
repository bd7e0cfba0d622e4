//! Effective run configuration: a TOML file with optional `[phantom]`,
//! `[train]` and `[pipeline]` tables, then command-line overrides.

use std::fs;
use std::path::Path;

use radpos::classifier::{InputLayout, TrainConfig};
use radpos::cohort::{SignificanceRule, DEFAULT_CUTOFF};
use radpos::fusion::{ZoneTemplate, DEFAULT_OVERLAP_MIN};
use radpos::phantom::PhantomConfig;
use radpos::pipeline::{PipelineConfig, DEFAULT_THRESHOLDS};
use radpos::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub layout: InputLayout,
    pub cutoff: u8,
    pub grade_min: u8,
    pub thresholds: Vec<f64>,
    pub controlled_sen: Vec<f64>,
    pub overlap_min: f64,
    pub zone_splits: [usize; 3],
    /// Patients evaluated by `infer`, `fuse` and `sweep`.
    pub split: SplitChoice,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            layout: InputLayout::Bpmr,
            cutoff: DEFAULT_CUTOFF,
            grade_min: SignificanceRule::GLEASON_3_PLUS_4.min_grade_group(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            controlled_sen: vec![0.8],
            overlap_min: DEFAULT_OVERLAP_MIN,
            zone_splits: ZoneTemplate::default().splits,
            split: SplitChoice::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        let p = &self.pipeline;
        SignificanceRule::new(p.grade_min)?;
        if p.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if p.controlled_sen.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("controlled sensitivities must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&p.overlap_min) {
            return Err(Error::Config("overlap_min must lie in [0, 1)".into()));
        }
        if p.zone_splits.contains(&0) {
            return Err(Error::Config("zone_splits must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn rule(&self) -> SignificanceRule {
        SignificanceRule::new(self.pipeline.grade_min).expect("validated")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            layout: self.pipeline.layout,
            cutoff: self.pipeline.cutoff,
            rule: self.rule(),
            train: self.train.clone(),
            overlap_min: self.pipeline.overlap_min,
            template: ZoneTemplate {
                splits: self.pipeline.zone_splits,
            },
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("[pipeline]\ncutoff = 4\nlayout = \"t2\"\n").unwrap();
        assert_eq!(c.pipeline.cutoff, 4);
        assert_eq!(c.pipeline.layout, InputLayout::T2);
        assert_eq!(c.phantom, PhantomConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[pipeline]\ncutof = 4\n").is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
