use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{MethodKind, ScoreRule};
use crate::network::Architecture;
use crate::objectives::LossConfig;
use crate::optimizer::OptimizerSpec;

/// Everything needed to reproduce one experiment. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: MethodKind,
    pub arch: Architecture,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub ood_train: OodTrainSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ft: Option<FinetuneSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
    /// Share of the training data held out for accuracy logging.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub schedule: ScheduleGranularity,
    /// Overrides the method's default detection score.
    #[serde(default)]
    pub score_rule: Option<ScoreRule>,
}

fn default_epochs() -> usize {
    100
}

fn default_batch_size() -> usize {
    128
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n_per_class: usize,
        test_per_class: usize,
        noise_sd: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training images.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// Auxiliary OOD data used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodTrainSpec {
    /// Shell `r_min <= |x - center| < r_max`; the center defaults to the
    /// training-data mean.
    Annulus {
        r_min: f64,
        r_max: f64,
        count: usize,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    UniformNoise {
        count: usize,
    },
    /// Permuted, blurred and rescaled training images.
    SmoothNoise {
        count: usize,
    },
}

impl Default for OodTrainSpec {
    fn default() -> Self {
        OodTrainSpec::Annulus {
            r_min: 2.5,
            r_max: 6.0,
            count: 1000,
            center: None,
        }
    }
}

/// Two-stage fine-tuning of a Standard model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    /// Epochs spent on the new extra-head parameters alone.
    pub head_pretrain_epochs: usize,
    /// Epochs spent on all parameters.
    pub ft_epochs: usize,
    /// Optimizer for both stages; falls back to the config's optimizer.
    pub optimizer: Option<OptimizerSpec>,
    pub lambda: Option<f64>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            head_pretrain_epochs: 10,
            ft_epochs: 10,
            optimizer: None,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub far_away_t: f64,
    pub far_away_count: usize,
    pub uniform_noise: bool,
    /// Only meaningful for square-image inputs.
    pub smooth_noise: bool,
    pub noise_count: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            far_away_t: 1e4,
            far_away_count: 1000,
            uniform_noise: false,
            smooth_noise: false,
            noise_count: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleGranularity {
    #[default]
    PerStep,
    PerEpoch,
}

impl ExperimentConfig {
    /// Two-moons setup with per-method defaults for the OOD weight. With
    /// 2000 points per class an epoch is about 30 steps at batch 128; at 500
    /// per class 100 epochs leave the quadratic head undertrained.
    pub fn two_moons(method: MethodKind) -> Self {
        Self {
            method,
            arch: Architecture {
                input_dim: 2,
                hidden_dims: vec![64, 64],
                num_classes: 2,
            },
            dataset: DatasetSpec::TwoMoons {
                n_per_class: 2000,
                test_per_class: 500,
                noise_sd: 0.1,
            },
            ood_train: OodTrainSpec::default(),
            loss: LossConfig {
                lambda: LossConfig::default_lambda(method),
                ..LossConfig::default()
            },
            optimizer: OptimizerSpec::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seeds: default_seeds(),
            ft: method.is_finetune().then(FinetuneSpec::default),
            eval: EvalSpec::default(),
            validation_fraction: default_validation_fraction(),
            schedule: ScheduleGranularity::PerStep,
            score_rule: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if let Some(ft) = &self.ft {
            if let Some(o) = &ft.optimizer {
                o.validate()?;
            }
            if ft.lambda.is_some_and(|l| l.is_nan() || l < 0.0) {
                return Err(Error::Config("ft.lambda must be >= 0".into()));
            }
        }
        if let OodTrainSpec::Annulus { r_min, r_max, .. } = &self.ood_train {
            if !(0.0 <= *r_min && r_min <= r_max) {
                return Err(Error::Config("annulus needs 0 <= r_min <= r_max".into()));
            }
        }
        Ok(())
    }

    pub fn score_rule(&self) -> ScoreRule {
        self.score_rule.unwrap_or(self.method.default_score_rule())
    }
}
