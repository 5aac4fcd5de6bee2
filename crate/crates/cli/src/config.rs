//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxmind::audio::SpectrogramParams;
use voxmind::augment::AugmentPipeline;
use voxmind::dataset::SplitSpec;
use voxmind::nn::train::{StopMetric, TrainConfig};
use voxmind::transfer::TransferConfig;
use voxmind::zoo::ModelName;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    P1,
    P2,
    P3,
    All,
}

impl Phase {
    pub fn number(self) -> Option<u8> {
        match self {
            Phase::P1 => Some(1),
            Phase::P2 => Some(2),
            Phase::P3 => Some(3),
            Phase::All => None,
        }
    }

    pub fn expand(self) -> Vec<Phase> {
        match self {
            Phase::All => vec![Phase::P1, Phase::P2, Phase::P3],
            p => vec![p],
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "p1" | "1" => Ok(Phase::P1),
            "p2" | "2" => Ok(Phase::P2),
            "p3" | "3" => Ok(Phase::P3),
            "all" => Ok(Phase::All),
            _ => Err(format!("unknown phase '{s}' (expected p1, p2, p3 or all)")),
        }
    }
}

/// Parameters for generating the synthetic corpus when no manifest exists yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub clips_per_subject: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { seed: 7, n_subjects: 12, clips_per_subject: 10, sample_rate: 48_000, duration_s: 2.0 }
    }
}

fn phase1_default() -> TrainConfig {
    TrainConfig { batch_size: 16, alpha: 1e-4, early_stop_metric: StopMetric::ValLoss, ..TrainConfig::default() }
}

fn phase2_default() -> TrainConfig {
    TrainConfig { batch_size: 32, ..phase1_default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest to run on; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub models: Vec<ModelName>,
    pub phase: Phase,
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub spectrogram: SpectrogramParams,
    pub split: SplitSpec,
    pub augment: AugmentPipeline,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub phase3: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: PathBuf::from("corpus/manifest.jsonl"),
            output_dir: PathBuf::from("runs"),
            models: ModelName::ALL.to_vec(),
            phase: Phase::All,
            seeds: vec![1, 2, 3],
            corpus: CorpusConfig::default(),
            spectrogram: SpectrogramParams::default(),
            split: SplitSpec { seed: 2024, ..SplitSpec::default() },
            augment: AugmentPipeline::standard(2024),
            phase1: phase1_default(),
            phase2: phase2_default(),
            phase3: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and resolve `manifest` and `output_dir` against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.models.is_empty() {
            return bad("models must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.spectrogram.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.corpus.sample_rate != self.spectrogram.sample_rate {
            return bad(format!(
                "corpus.sample_rate {} differs from spectrogram.sample_rate {}",
                self.corpus.sample_rate, self.spectrogram.sample_rate
            ));
        }
        self.split.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, t) in [("phase1", &self.phase1), ("phase2", &self.phase2), ("phase3.train", &self.phase3.train)] {
            if let Err(e) = t.validate() {
                return bad(format!("{name}: {e}"));
            }
        }
        self.phase3.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Number of samples per clip at the configured spectrogram parameters.
    pub fn clip_len(&self) -> usize {
        (self.corpus.duration_s * self.spectrogram.sample_rate as f64).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("seeds = [1]\nlearning_rate = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml("[phase1]\nalpah = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml("[[augment.ops]]\nprobability = 0.5\nop = { kind = \"time_mask\", max_width_frac = 0.1, extra = 1 }\n").is_err());
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.phase1.batch_size, c.phase2.batch_size, c.phase3.train.batch_size), (16, 32, 16));
        assert_eq!((c.phase1.alpha, c.phase3.fine_tune_alpha), (1e-4, 1e-5));
        assert_eq!(c.phase3.train.early_stop_metric, StopMetric::ValAccuracy);
        assert_eq!(c.phase1.early_stop_patience, 10);
    }
}
