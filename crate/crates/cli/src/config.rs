//! Run configuration: one JSON file drives every subcommand.

use std::path::{Path, PathBuf};

use bridgekit::bridge::ObjectiveKind;
use bridgekit::net::{AdamConfig, ArchSpec};
use bridgekit::problems::ProblemSpec;
use bridgekit::sampler::{SamplerConfig, SamplerMethod};
use bridgekit::schedule::ScheduleSpec;
use bridgekit::train::{BridgeMode, TimeSampling, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "BRIDGEKIT_SEED";

/// Training settings. Seed, schedule and output paths come from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub objective: ObjectiveKind,
    pub arch: ArchSpec,
    pub steps: u64,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub time_sampling: TimeSampling,
    pub grid_size: usize,
    pub bridge_mode: BridgeMode,
    pub checkpoint_every: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            arch: t.arch,
            steps: t.steps,
            batch: t.batch,
            optimizer: t.optimizer,
            time_sampling: t.time_sampling,
            grid_size: t.grid_size,
            bridge_mode: t.bridge_mode,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SamplerMethod,
    pub n_steps: Option<usize>,
    pub guidance_rate: f64,
    pub record_trajectory: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            method: s.method,
            n_steps: s.n_steps,
            guidance_rate: s.guidance_rate,
            record_trajectory: s.record_trajectory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub problem: ProblemSpec,
    pub train: TrainSpec,
    pub sampler: SamplerSpec,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleSpec::default(),
            problem: ProblemSpec::default(),
            train: TrainSpec::default(),
            sampler: SamplerSpec::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads, applies the seed override, and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with the environment override applied.
    pub fn defaults() -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_env()?;
        Ok(cfg)
    }

    fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &'static str| move |e: bridgekit::Error| CliError::Config(format!("{name}: {e}"));
        self.schedule.build().map_err(field("schedule"))?;
        self.problem.build().map_err(field("problem"))?;
        self.train_config(None).validate().map_err(field("train"))?;
        self.sampler_config().validate().map_err(field("sampler"))?;
        Ok(())
    }

    /// Library training config; `out` receives the checkpoint.
    pub fn train_config(&self, out: Option<&Path>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective: t.objective,
            schedule: self.schedule.clone(),
            arch: t.arch.clone(),
            steps: t.steps,
            batch: t.batch,
            optimizer: t.optimizer,
            time_sampling: t.time_sampling,
            grid_size: t.grid_size,
            bridge_mode: t.bridge_mode,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            checkpoint_path: out.map(|d| d.join(CHECKPOINT_FILE)),
            loss_log: out.map(|d| d.join(LOSS_FILE)),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            method: s.method,
            n_steps: s.n_steps,
            guidance_rate: s.guidance_rate,
            seed: self.seed,
            record_trajectory: s.record_trajectory,
            zero_noise: false,
        }
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"stepz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn validation_names_the_section() {
        let cfg = RunConfig {
            train: TrainSpec {
                batch: 0,
                ..TrainSpec::default()
            },
            ..RunConfig::default()
        };
        match cfg.validate() {
            Err(CliError::Config(m)) => assert!(m.starts_with("train:"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(a.sha256().len(), 64);
        assert_ne!(a.sha256(), b.sha256());
    }

    #[test]
    fn guide_example_parses() {
        let md = include_str!("../../../book/src/cli.md");
        let start = md.find("```json\n").unwrap() + "```json\n".len();
        let end = start + md[start..].find("```").unwrap();
        let cfg: RunConfig = serde_json::from_str(&md[start..end]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.steps, 20_000);
    }
}
