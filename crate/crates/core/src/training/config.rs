use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::SpecAugmentConfig;
use crate::error::{FlapError, Result};
use crate::masking::MaskStrategy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

/// Flat `key = value` training settings. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub peak_lr: f64,
    /// Defaults to 5% of the total step count.
    pub warmup_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm clip; off when unset.
    pub grad_clip: Option<f64>,
    pub masking: MaskKind,
    pub mask_ratio: f64,
    /// 2-D groups; defaults to the number of time rows in the patch grid.
    pub mask_groups: Option<usize>,
    pub group_ratio: f64,
    pub frame_ratio: f64,
    pub recon_weight: f64,
    pub symmetric_loss: bool,
    pub spec_augment: bool,
    pub spec_time_mask: usize,
    pub spec_freq_mask: usize,
    pub fusion: bool,
    pub feature_mean: f64,
    pub feature_std: f64,
    pub checkpoint_dir: Option<PathBuf>,
    pub keep_checkpoints: usize,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 16,
            epochs: 45,
            max_steps: None,
            peak_lr: 1e-4,
            warmup_steps: None,
            beta1: 0.99,
            beta2: 0.9,
            eps: 1e-8,
            grad_clip: None,
            masking: MaskKind::None,
            mask_ratio: 0.0,
            mask_groups: None,
            group_ratio: 0.2,
            frame_ratio: 0.2,
            recon_weight: 1.0,
            symmetric_loss: true,
            spec_augment: true,
            spec_time_mask: 192,
            spec_freq_mask: 48,
            fusion: false,
            feature_mean: 0.0,
            feature_std: 1.0,
            checkpoint_dir: None,
            keep_checkpoints: 2,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| FlapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlapError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(FlapError::Config("batch_size and epochs must be positive".into()));
        }
        if self.batch_size == 1 {
            log::warn!("batch_size 1 makes the contrastive loss identically zero");
        }
        if self.peak_lr.is_nan() || self.peak_lr < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(FlapError::Config("peak_lr must be >= 0 and eps > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FlapError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.feature_std.is_nan() || self.feature_std <= 0.0 {
            return Err(FlapError::Config("feature_std must be positive".into()));
        }
        if self.recon_weight < 0.0 {
            return Err(FlapError::Config("recon_weight must be non-negative".into()));
        }
        if self.keep_checkpoints == 0 {
            return Err(FlapError::Config("keep_checkpoints must be at least 1".into()));
        }
        Ok(())
    }

    /// Masking strategy for a grid with `time_rows` rows of patches.
    pub fn mask_strategy(&self, time_rows: usize) -> MaskStrategy {
        match self.masking {
            MaskKind::None => MaskStrategy::None,
            MaskKind::OneD => MaskStrategy::OneD { ratio: self.mask_ratio },
            MaskKind::TwoD => MaskStrategy::TwoD {
                groups: self.mask_groups.unwrap_or(time_rows),
                group_ratio: self.group_ratio,
                frame_ratio: self.frame_ratio,
            },
        }
    }

    pub fn spec_augment_config(&self) -> Option<SpecAugmentConfig> {
        self.spec_augment.then_some(SpecAugmentConfig {
            max_time: self.spec_time_mask,
            max_freq: self.spec_freq_mask,
        })
    }

    /// Warmup length for a run of `total_steps`.
    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * 0.05).round() as usize)
            .min(total_steps.saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = TrainConfig::from_toml("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.beta1, c.beta2, c.peak_lr, c.epochs), (0.99, 0.9, 1e-4, 45));
        let c = TrainConfig::from_toml("masking = \"2d\"\nseed = 7\npeak_lr = 0.001\n").unwrap();
        assert_eq!(c.masking, MaskKind::TwoD);
        assert_eq!(c.seed, 7);
        assert!(matches!(c.mask_strategy(63), MaskStrategy::TwoD { groups: 63, .. }));
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_toml("learning_rate = 1.0").is_err());
        assert!(TrainConfig::from_toml("beta1 = 1.5").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn warmup_defaults_to_five_percent() {
        let c = TrainConfig::default();
        assert_eq!(c.warmup_for(1000), 50);
        assert_eq!(c.warmup_for(1), 0);
    }
}
