//! Experiment configuration: one TOML file fully describes a run — the model
//! family with its hyperparameters, the training schedule, and evaluation
//! settings. Fields that only apply to some families are rejected elsewhere
//! so a config cannot silently carry dead settings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::TrainSchedule;
use crate::model::{CovKind, KlMode, LatentSpec, MixtureSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Axis-aligned (diagonal covariance) Gaussian latent.
    Aa,
    /// Full-covariance Gaussian latent.
    Fc,
    /// Full covariance through a low-rank-plus-diagonal factorization.
    FcLr,
    AaMixture,
    FcMixture,
    FcLrMixture,
    /// Deterministic U-Net sampled via dropout at inference.
    McDropout,
    /// Independently trained deterministic U-Nets.
    Ensemble,
    /// Single deterministic U-Net baseline.
    Unet,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Aa,
        Family::Fc,
        Family::FcLr,
        Family::AaMixture,
        Family::FcMixture,
        Family::FcLrMixture,
        Family::McDropout,
        Family::Ensemble,
        Family::Unet,
    ];

    /// Families with a latent distribution (prior/posterior encoders).
    pub fn is_probabilistic(self) -> bool {
        matches!(
            self,
            Family::Aa
                | Family::Fc
                | Family::FcLr
                | Family::AaMixture
                | Family::FcMixture
                | Family::FcLrMixture
        )
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, Family::AaMixture | Family::FcMixture | Family::FcLrMixture)
    }

    pub fn has_rank(self) -> bool {
        matches!(self, Family::FcLr | Family::FcLrMixture)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Family::Aa => "aa",
            Family::Fc => "fc",
            Family::FcLr => "fc-lr",
            Family::AaMixture => "aa-mixture",
            Family::FcMixture => "fc-mixture",
            Family::FcLrMixture => "fc-lr-mixture",
            Family::McDropout => "mc-dropout",
            Family::Ensemble => "ensemble",
            Family::Unet => "unet",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Latent dimension; probabilistic families only.
    pub latent_dim: Option<usize>,
    /// KL weight; probabilistic families only.
    pub beta: Option<f64>,
    /// Covariance factor rank; fc-lr families only.
    pub rank: Option<usize>,
    /// Mixture component count; mixture families only.
    pub components: Option<usize>,
    /// Gumbel-softmax temperature; mixture families only.
    pub temperature: Option<f64>,
    /// mc-dropout only.
    pub dropout_rate: Option<f64>,
    /// ensemble only.
    pub ensemble_size: Option<usize>,
    pub filters: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: None,
            beta: None,
            rank: None,
            components: None,
            temperature: None,
            dropout_rate: None,
            ensemble_size: None,
            filters: vec![4, 8, 16],
            bottleneck: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub augment: bool,
    /// Monte-Carlo KL samples per step; mixture families only use this.
    pub kl_samples: usize,
    /// Train with only the first k raters; defaults to all raters.
    pub raters_used: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            lr: 1e-3,
            batch_size: 8,
            patience: 20,
            max_epochs: 100,
            augment: true,
            kl_samples: 8,
            raters_used: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Prediction samples per test image.
    pub n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_samples: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    pub seed: u64,
    /// Directory holding a generated dataset.
    pub dataset: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::format(origin, format!("bad experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.family;
        let m = &self.model;
        let reject = |field: &str, when: &str| -> Result<()> {
            Err(Error::config(format!("{field} is only valid for {when}, not {f}")))
        };
        if f.is_probabilistic() {
            let dim = m
                .latent_dim
                .ok_or_else(|| Error::config(format!("{f} requires model.latent_dim")))?;
            if dim == 0 {
                return Err(Error::config("latent_dim must be positive".to_string()));
            }
            if f.has_rank() {
                let rank = m
                    .rank
                    .ok_or_else(|| Error::config(format!("{f} requires model.rank")))?;
                if rank == 0 || rank + 1 > dim {
                    return Err(Error::config(format!(
                        "rank must satisfy 1 <= rank <= latent_dim - 1 = {}, got {rank}",
                        dim.saturating_sub(1)
                    )));
                }
            } else if m.rank.is_some() {
                return reject("model.rank", "the fc-lr families");
            }
            if f.is_mixture() {
                let n = m
                    .components
                    .ok_or_else(|| Error::config(format!("{f} requires model.components")))?;
                if n == 0 {
                    return Err(Error::config("components must be positive".to_string()));
                }
                let tau = m
                    .temperature
                    .ok_or_else(|| Error::config(format!("{f} requires model.temperature")))?;
                if !(tau > 0.0) {
                    return Err(Error::config(format!("temperature must be positive, got {tau}")));
                }
            } else {
                if m.components.is_some() {
                    return reject("model.components", "the mixture families");
                }
                if m.temperature.is_some() {
                    return reject("model.temperature", "the mixture families");
                }
            }
            if let Some(beta) = m.beta {
                if !(beta >= 0.0) {
                    return Err(Error::config(format!("beta must be non-negative, got {beta}")));
                }
            }
        } else {
            for (name, present) in [
                ("model.latent_dim", m.latent_dim.is_some()),
                ("model.beta", m.beta.is_some()),
                ("model.rank", m.rank.is_some()),
                ("model.components", m.components.is_some()),
                ("model.temperature", m.temperature.is_some()),
            ] {
                if present {
                    return reject(name, "the probabilistic families");
                }
            }
        }
        match f {
            Family::McDropout => {
                let rate = m
                    .dropout_rate
                    .ok_or_else(|| Error::config("mc-dropout requires model.dropout_rate".to_string()))?;
                if !(0.0..1.0).contains(&rate) || rate == 0.0 {
                    return Err(Error::config(format!(
                        "dropout_rate must be in (0, 1), got {rate}"
                    )));
                }
            }
            _ => {
                if m.dropout_rate.is_some() {
                    return reject("model.dropout_rate", "mc-dropout");
                }
            }
        }
        match f {
            Family::Ensemble => {
                let size = m.ensemble_size.unwrap_or(4);
                if size < 2 {
                    return Err(Error::config(format!(
                        "ensemble_size must be at least 2, got {size}"
                    )));
                }
            }
            _ => {
                if m.ensemble_size.is_some() {
                    return reject("model.ensemble_size", "ensemble");
                }
            }
        }
        if m.filters.len() != 3 || m.filters.contains(&0) {
            return Err(Error::config(format!(
                "model.filters must be three positive depths, got {:?}",
                m.filters
            )));
        }
        if m.bottleneck == 0 {
            return Err(Error::config("model.bottleneck must be positive".to_string()));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::config("eval.n_samples must be positive".to_string()));
        }
        if let Some(k) = self.schedule.raters_used {
            if k == 0 {
                return Err(Error::config("schedule.raters_used must be positive".to_string()));
            }
        }
        self.to_schedule().validate()
    }

    pub fn ensemble_size(&self) -> usize {
        self.model.ensemble_size.unwrap_or(4)
    }

    /// Network layout for this family on `image_size` inputs.
    pub fn to_model_spec(&self, image_size: usize) -> ModelSpec {
        let latent = if self.family.is_probabilistic() {
            let dim = self.model.latent_dim.expect("validated");
            let cov = match self.family {
                Family::Aa | Family::AaMixture => CovKind::Diag,
                Family::Fc | Family::FcMixture => CovKind::Full,
                Family::FcLr | Family::FcLrMixture => CovKind::LowRank {
                    rank: self.model.rank.expect("validated"),
                },
                _ => unreachable!(),
            };
            let mixture = self.family.is_mixture().then(|| MixtureSpec {
                components: self.model.components.expect("validated"),
                temperature: self.model.temperature.expect("validated"),
            });
            Some(LatentSpec { dim, cov, mixture })
        } else {
            None
        };
        ModelSpec {
            in_channels: 1,
            image_size,
            filters: self.model.filters.clone(),
            bottleneck: self.model.bottleneck,
            latent,
            dropout: if self.family == Family::McDropout {
                self.model.dropout_rate.expect("validated")
            } else {
                0.0
            },
            beta: self.model.beta.unwrap_or(1.0),
        }
    }

    pub fn kl_mode(&self) -> KlMode {
        if self.family.is_mixture() {
            KlMode::MonteCarlo { samples: self.schedule.kl_samples }
        } else {
            KlMode::ClosedForm
        }
    }

    pub fn to_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr: self.schedule.lr,
            batch_size: self.schedule.batch_size,
            patience: self.schedule.patience,
            max_epochs: self.schedule.max_epochs,
            seed: self.seed,
            augment: self.schedule.augment,
            kl_mode: self.kl_mode(),
        }
    }
}
