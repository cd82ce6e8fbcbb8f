use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, gen_synthetic, AugmentConfig, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::SgdConfig;

/// Where training data comes from: a dataset root on disk, or the synthetic
/// generator when no root is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub synthetic: SynthConfig,
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        match &self.root {
            Some(root) => {
                let (splits, report) = load_dataset(root, None)?;
                if !report.skipped.is_empty() || report.missing_keypoints > 0 {
                    log::warn!(
                        "{}: {} samples skipped, {} without keypoints",
                        root.display(),
                        report.skipped.len(),
                        report.missing_keypoints
                    );
                }
                Ok(splits)
            }
            None => gen_synthetic(&self.synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Adds the keypoint heatmap loss; needs a template-matching head.
    pub awk: bool,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds weight init, shuffling and augmentation. The synthetic data
    /// has its own seed.
    pub seed: u64,
    /// The learning rate is multiplied by `lr_decay` at each milestone,
    /// given as fractions of `epochs`.
    pub lr_decay: f64,
    pub lr_milestones: Vec<f64>,
    pub threshold: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            awk: true,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            lr_decay: 0.1,
            lr_milestones: vec![0.6, 0.85],
            threshold: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.awk && !self.model.head.is_dtm() {
            return bad("awk needs a template-matching head, not fc_baseline".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda > 0.0) {
            return bad("alpha and beta must be >= 0 and lambda > 0".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, momentum and weight_decay must be >= 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.lr_milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) || !(self.lr_decay > 0.0) {
            return bad("lr milestones must lie in (0, 1] and lr_decay must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.data.root.is_none() {
            let r = self.model.down_stride();
            if self.data.synthetic.down_stride != r {
                return bad(format!(
                    "synthetic down_stride {} differs from the model's {r}",
                    self.data.synthetic.down_stride
                ));
            }
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMode;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(11), 0.01);
        assert!((cfg.lr_at(12) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(17) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("epochs = 3\n[model]\nhead = \"dtm_gap\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model.head, HeadMode::DtmGap);
        assert!(TrainConfig::from_toml_str("awk = true\n[model]\nhead = \"fc_baseline\"\n").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
