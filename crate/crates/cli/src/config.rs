//! Project configuration: a TOML file plus command-line and environment overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use puppetry_core::nn::AdamSettings;
use puppetry_core::oracle::OracleSpec;
use puppetry_core::renderer::{erosion_radius_for, RendererConfig};
use puppetry_core::training::{PerceptualChoice, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

pub const DATA_ROOT_ENV: &str = "PUPPETRY_DATA_ROOT";

/// Partial training settings layered over a stage default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub decay_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub temporal_weight: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub adam: Option<AdamSettings>,
}

impl TrainingOverrides {
    pub fn apply(&self, mut base: TrainingConfig) -> TrainingConfig {
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.decay_epochs {
            base.decay_epochs = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.temporal_weight {
            base.temporal_weight = v;
        }
        if let Some(v) = self.validation_fraction {
            base.validation_fraction = v;
        }
        if let Some(v) = self.adam {
            base.adam = v;
        }
        base
    }
}

/// Shape of a generated oracle corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCorpusConfig {
    /// Number of training sequences, one per synthetic person.
    pub persons: u64,
    pub frames: usize,
    /// Frames of the separate target sequence (an unseen person).
    pub target_frames: usize,
    pub spec: OracleSpec,
}

impl Default for OracleCorpusConfig {
    fn default() -> Self {
        Self {
            persons: 3,
            frames: 300,
            target_frames: 300,
            spec: OracleSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Logit file to animate; defaults to the target sequence's own logits.
    pub logits: Option<PathBuf>,
    /// Assemble the frames into `video.mp4` when `ffmpeg` is on the PATH.
    pub video: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default = "default_data_root")]
    pub data_root: PathBuf,
    /// Stage-1 training sequences; empty means every sequence except the target.
    #[serde(default)]
    pub sequences: Vec<String>,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Defaults to the resolution-scaled radius.
    #[serde(default)]
    pub erosion_radius: Option<usize>,
    #[serde(default)]
    pub perceptual: PerceptualChoice,
    /// Trailing fraction of the target sequence reserved for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Ridge weight of the new-target mapping solve.
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub a2e: TrainingOverrides,
    #[serde(default)]
    pub renderer_training: TrainingOverrides,
    #[serde(default)]
    pub renderer: RendererConfig,
    #[serde(default)]
    pub oracle: OracleCorpusConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

fn default_data_root() -> PathBuf {
    PathBuf::from("data")
}

fn default_target() -> String {
    "target".into()
}

fn default_resolution() -> usize {
    64
}

fn default_holdout() -> f64 {
    0.1
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub resolution: Option<usize>,
    pub data_root: Option<PathBuf>,
}

impl ProjectConfig {
    /// Parses, applies overrides and resolves relative paths against the config file.
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ProjectConfig = toml::from_str(&text)
            .map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_root = match &overrides.data_root {
            Some(root) => root.clone(),
            None => base.join(&cfg.data_root),
        };
        if let Some(logits) = &cfg.infer.logits {
            cfg.infer.logits = Some(base.join(logits));
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(r) = overrides.resolution {
            cfg.resolution = r;
        }
        if let Some(e) = overrides.epochs {
            cfg.a2e.epochs = Some(e);
            cfg.renderer_training.epochs = Some(e);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        let fail = |m: String| Err(ValidationError(m).into());
        if self.resolution < 8 {
            return fail(format!("resolution {} is below 8 pixels", self.resolution));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must lie in [0, 1)".into());
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return fail("ridge must be non-negative".into());
        }
        self.a2e_training()
            .validate()
            .context("[a2e] training settings")
            .map_err(|e| ValidationError(format!("{e:#}")))?;
        self.renderer_training_config()
            .validate()
            .context("[renderer_training] settings")
            .map_err(|e| ValidationError(format!("{e:#}")))?;
        Ok(())
    }

    /// Requires the dataset root to exist.
    pub fn require_data_root(&self) -> anyhow::Result<&Path> {
        if !self.data_root.is_dir() {
            return Err(ValidationError(format!(
                "dataset root {} does not exist (set data_root or {DATA_ROOT_ENV})",
                self.data_root.display()
            ))
            .into());
        }
        Ok(&self.data_root)
    }

    pub fn a2e_training(&self) -> TrainingConfig {
        self.finish(self.a2e.apply(TrainingConfig::default()), &self.a2e)
    }

    pub fn renderer_training_config(&self) -> TrainingConfig {
        self.finish(
            self.renderer_training
                .apply(TrainingConfig::renderer_default()),
            &self.renderer_training,
        )
    }

    /// Seeds the run and keeps the decay span proportional when only the epoch count changed.
    fn finish(&self, mut cfg: TrainingConfig, o: &TrainingOverrides) -> TrainingConfig {
        cfg.seed = self.seed;
        if o.epochs.is_some() && o.decay_epochs.is_none() {
            let d = TrainingConfig::default();
            cfg.decay_epochs = (cfg.epochs * d.decay_epochs + d.epochs / 2) / d.epochs;
        }
        cfg
    }

    pub fn erosion_radius(&self) -> usize {
        self.erosion_radius
            .unwrap_or_else(|| erosion_radius_for(self.resolution))
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        OracleSpec {
            world_seed: self.seed,
            resolution: self.resolution,
            ..self.oracle.spec.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, o: &Overrides) -> anyhow::Result<ProjectConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("project.toml");
        std::fs::write(&p, text).unwrap();
        ProjectConfig::load(&p, o)
    }

    #[test]
    fn empty_file_uses_defaults() {
        let c = load("", &Overrides::default()).unwrap();
        assert_eq!(c.a2e_training(), TrainingConfig::default());
        assert_eq!(c.renderer_training_config().batch_size, 1);
        assert_eq!(c.erosion_radius(), 1);
        assert!(c.data_root.ends_with("data"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load("sed = 3", &Overrides::default()).is_err());
        assert!(load("[a2e]\nlearning_rte = 1.0", &Overrides::default()).is_err());
        assert!(load("[renderer]\nwidth = 3", &Overrides::default()).is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let o = Overrides {
            seed: Some(9),
            epochs: Some(5),
            resolution: Some(32),
            data_root: Some(PathBuf::from("/elsewhere")),
        };
        let c = load(
            "seed = 1\nresolution = 64\n[a2e]\nlearning_rate = 0.001",
            &o,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.resolution, 32);
        assert_eq!(c.data_root, PathBuf::from("/elsewhere"));
        let a = c.a2e_training();
        assert_eq!(
            (a.epochs, a.decay_epochs, a.seed, a.learning_rate),
            (5, 3, 9, 1e-3)
        );
        assert_eq!(c.renderer_training_config().epochs, 5);
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        let e = load("holdout_fraction = 1.5", &Overrides::default()).unwrap_err();
        assert!(e.downcast_ref::<ValidationError>().is_some());
        let e = load("[a2e]\ndecay_epochs = 80", &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("decay_epochs"), "{e}");
    }
}
