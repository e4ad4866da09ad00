//! Run configuration: one TOML document covering the model, training
//! schedule, loss weights, mel scales, SSL provider, discriminators and data.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignVariant, SslProviderConfig};
use crate::disc::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, MelScaleConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub grad_clip: f64,
    pub segment_seconds: f64,
    pub data_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_gamma: 0.9996,
            adam_beta1: 0.8,
            adam_beta2: 0.9,
            batch_size: 16,
            total_steps: 1000,
            checkpoint_every: 500,
            seed: 0,
            grad_clip: 1e3,
            segment_seconds: 3.0,
            data_workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return Err(Error::Config("lr_decay_gamma must be in (0, 1]".into()));
        }
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub variant: AlignVariant,
    pub kernel_size: usize,
    /// Align against the sampled z (paper formulation) or the posterior mean.
    pub target: AlignTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignTarget {
    Sample,
    Mean,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { variant: AlignVariant::Cos, kernel_size: 1, target: AlignTarget::Sample }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub mel: MelScaleConfig,
    pub ssl: SslProviderConfig,
    pub discriminator: DiscriminatorConfig,
    pub align: AlignConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss_weights.validate()?;
        self.mel.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nnot_a_field = 3\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("top_level_mystery = true\n");
        assert!(err.is_err());
    }

    #[test]
    fn paper_defaults_present() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.lr_decay_gamma, 0.9996);
        assert_eq!(cfg.loss_weights.lambda_recon, 15.0);
        assert_eq!(cfg.loss_weights.lambda_kl, 0.01);
        assert_eq!(cfg.loss_weights.lambda_adv, 1.0);
        assert_eq!(cfg.loss_weights.lambda_feat, 2.0);
        assert_eq!(cfg.loss_weights.lambda_align, 1.0);
        assert_eq!(cfg.model.encoder_strides, vec![4, 4, 5, 5]);
        assert_eq!(cfg.model.latent_dim, 64);
    }
}
