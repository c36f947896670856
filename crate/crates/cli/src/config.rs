//! Run configuration: TOML file values, then `V2M_*` environment variables,
//! then flags. Clap resolves flag-over-environment; this module layers the
//! result over the file and the defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use v2m_core::dataset::{SplitSpec, SynthConfig, DEFAULT_T_MAX};
use v2m_core::model::{GenerationConstraints, ModelConfig};
use v2m_core::regressor::RegressorConfig;
use v2m_core::train::{LossWeights, OptimizerSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Train, validation and test shares.
    pub ratios: [u32; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        let (a, b, c) = SplitSpec::default().ratios;
        SplitSection { ratios: [a, b, c] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub emotion_window: usize,
    /// Key-profile file; the bundled tables are used when absent.
    pub key_profiles: Option<PathBuf>,
}

impl Default for ExtractSection {
    fn default() -> Self {
        ExtractSection {
            emotion_window: 5,
            key_profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, shuffling, splitting and synthesis.
    pub seed: u64,
    pub t_max: usize,
    /// Zero wall-clock columns in logs.
    pub deterministic: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub regressor: RegressorConfig,
    pub split: SplitSection,
    pub synth: SynthConfig,
    pub generation: GenerationConstraints,
    pub extract: ExtractSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            t_max: DEFAULT_T_MAX,
            deterministic: false,
            data: None,
            out: None,
            model: ModelConfig::default(),
            optimizer: OptimizerSpec::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            regressor: RegressorConfig::default(),
            split: SplitSection::default(),
            synth: SynthConfig::default(),
            generation: GenerationConstraints::default(),
            extract: ExtractSection::default(),
        }
    }
}

/// Values that flags (or their `V2M_*` variables) can override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub t_max: Option<usize>,
    pub deterministic: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies overrides and checks the result. `--lr` sets the learning rate
    /// of whichever optimizer the command trains.
    pub fn resolve(mut self, o: &Overrides, regressor_lr: bool) -> Result<Self> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
            self.regressor.epochs = v;
        }
        if let Some(v) = o.lr {
            if regressor_lr {
                self.regressor.lr = v;
            } else {
                self.optimizer.base_lr = v;
            }
        }
        if let Some(v) = o.lambda {
            self.loss.lambda = v;
        }
        if let Some(v) = o.heads {
            self.model.n_heads = v;
        }
        if let Some(v) = o.layers {
            self.model.n_layers_enc = v;
            self.model.n_layers_dec = v;
        }
        if let Some(v) = o.t_max {
            self.t_max = v;
        }
        self.deterministic |= o.deterministic;
        if o.data.is_some() {
            self.data = o.data.clone();
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        self.regressor.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            bail!("t_max must be >= 1");
        }
        if self.split.ratios.iter().sum::<u32>() == 0 {
            bail!("split ratios must not all be zero");
        }
        self.train_config().validate()?;
        self.regressor.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            t_max: self.t_max,
            seed: self.seed,
            optimizer: self.optimizer,
            loss: self.loss,
            deterministic: self.deterministic,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        let [a, b, c] = self.split.ratios;
        SplitSpec {
            ratios: (a, b, c),
            shuffle_seed: self.seed,
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .context("no data directory; pass --data or set `data` in the config")
    }

    pub fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output path; pass --out or set `out` in the config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_sit_under_flags() {
        let cfg = RunConfig::from_toml("seed = 3\n[loss]\nlambda = 0.7\n[model]\nd_model = 16\nn_heads = 4\n").unwrap();
        assert_eq!(cfg.model.d_model, 16);
        let o = Overrides {
            lambda: Some(0.2),
            layers: Some(2),
            ..Default::default()
        };
        let cfg = cfg.resolve(&o, false).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.lambda, 0.2);
        assert_eq!(cfg.model.n_heads, 4);
        assert_eq!((cfg.model.n_layers_enc, cfg.model.n_layers_dec), (2, 2));
        assert_eq!(cfg.regressor.seed, 3);
        assert_eq!(cfg.split_spec().shuffle_seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nbeta3 = 0.1").is_err());
    }

    #[test]
    fn lambda_outside_unit_interval_fails() {
        let o = Overrides {
            lambda: Some(1.5),
            ..Default::default()
        };
        assert!(RunConfig::default().resolve(&o, false).is_err());
    }

    #[test]
    fn lr_targets_the_trained_optimizer() {
        let o = Overrides {
            lr: Some(0.01),
            ..Default::default()
        };
        let a = RunConfig::default().resolve(&o, false).unwrap();
        let b = RunConfig::default().resolve(&o, true).unwrap();
        assert_eq!(a.optimizer.base_lr, 0.01);
        assert_eq!(b.regressor.lr, 0.01);
        assert_eq!(b.optimizer.base_lr, OptimizerSpec::default().base_lr);
    }
}
