//! The single run configuration: model shapes, objective, optimization,
//! schedule, and the ablation switches, all with working defaults so an
//! empty config file runs the reference setup at toy scale.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecoderConfig, DecoderError};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::infer::{DecodeConfig, InferError};
use crate::objective::{NoiseConfig, ObjectiveError};
use crate::optim::SchedulerConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_encoder: 1e-4,
            lr_decoder: 4e-4,
            weight_decay: 1e-6,
        }
    }
}

/// Experiment switches; all on by default. Turning one off reproduces the
/// corresponding ablation row: raw captions, width-1 search, or a
/// noise-free / augmentation-free objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub noise: bool,
    pub beam: bool,
    pub augment: bool,
    pub preprocess: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            noise: true,
            beam: true,
            augment: true,
            preprocess: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// `vocab_size` and `enc_dim` here are placeholders; training overrides
    /// them from the built vocabulary and the encoder output width.
    pub decoder: DecoderConfig,
    pub noise: NoiseConfig,
    pub optim: OptimConfig,
    pub sched: SchedulerConfig,
    pub decode: DecodeConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            noise: NoiseConfig::default(),
            optim: OptimConfig::default(),
            sched: SchedulerConfig::default(),
            decode: DecodeConfig::default(),
            batch_size: 16,
            // The epoch budget is the one training knob with no principled
            // default; one epoch keeps an unconfigured run short.
            epochs: 1,
            seed: 42,
            folds: 4,
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: std::path::PathBuf,
        source: serde_json::Error,
    },
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("folds must be at least 1")]
    ZeroFolds,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

impl RunConfig {
    /// Defaults overridden by the JSON at `path` (which may set any subset
    /// of keys; unknown keys are rejected).
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.noise.validate()?;
        self.decode.validate()?;
        if self.batch_size == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if self.folds == 0 {
            return Err(ConfigError::ZeroFolds);
        }
        Ok(())
    }

    /// The noise settings the objective actually sees: the ablation switch
    /// masks `noise.enabled`.
    pub fn effective_noise(&self) -> NoiseConfig {
        NoiseConfig {
            enabled: self.noise.enabled && self.ablation.noise,
            ..self.noise
        }
    }

    /// The search width the decoders actually use: the ablation switch
    /// forces greedy.
    pub fn effective_beam(&self) -> usize {
        if self.ablation.beam {
            self.decode.beam_width
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_the_reference_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.folds, 4);
        assert_eq!(cfg.decode.beam_width, 2);
        assert_eq!(cfg.decode.max_len, 30);
        assert_eq!(cfg.optim.lr_encoder, 1e-4);
        assert_eq!(cfg.optim.lr_decoder, 4e-4);
        assert_eq!(cfg.optim.weight_decay, 1e-6);
        assert_eq!(cfg.noise.beta, 0.1);
        assert!(cfg.ablation.noise && cfg.ablation.beam);
    }

    #[test]
    fn partial_json_overrides_only_named_keys() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"batch_size": 4, "noise": {"beta": 0.5}, "sched": {"T0": 8}}"#,
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.noise.beta, 0.5);
        assert_eq!(cfg.noise.rate, 0.1);
        assert_eq!(cfg.sched.t0, 8);
        assert_eq!(cfg.folds, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"batch": 4}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"noise": {"enable": true}}"#).is_err()
        );
    }

    #[test]
    fn ablation_switches_mask_noise_and_beam() {
        let mut cfg = RunConfig::default();
        cfg.ablation.noise = false;
        assert!(!cfg.effective_noise().enabled);
        cfg.ablation.noise = true;
        cfg.noise.enabled = false;
        assert!(!cfg.effective_noise().enabled);
        cfg.noise.enabled = true;
        assert!(cfg.effective_noise().enabled);

        assert_eq!(cfg.effective_beam(), 2);
        cfg.ablation.beam = false;
        assert_eq!(cfg.effective_beam(), 1);
    }

    #[test]
    fn from_path_reports_io_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        assert!(matches!(
            RunConfig::from_path(&missing),
            Err(ConfigError::Io { .. })
        ));
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{nope").unwrap();
        assert!(matches!(
            RunConfig::from_path(&bad),
            Err(ConfigError::Parse { .. })
        ));
        let good = dir.path().join("good.json");
        std::fs::write(&good, r#"{"epochs": 3}"#).unwrap();
        assert_eq!(RunConfig::from_path(&good).unwrap().epochs, 3);
    }
}
