use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ShapesConfig, PROTOTYPES};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to f32 after every update; checkpoints hold f32.
    #[default]
    F32,
    /// Parameters stay f64; checkpoints hold f64.
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u64,
    /// Epochs (1-based) after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 200,
            decay_epochs: vec![15, 25],
            decay_factor: 0.1,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl OptimConfig {
    /// Learning rate for global step `step` (1-based) inside epoch `epoch` (1-based).
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decays = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("optim.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("optim.weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optim.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta2", "must be in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("optim.decay_factor", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: 2000,
            val_size: 500,
            max_objects: 4,
        }
    }
}

/// Offset between the training and validation generator seeds.
const VAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Seeds parameter initialization and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub capture_graphs: bool,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            capture_graphs: false,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Parses and validates. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.model.channels != 3 {
            return Err(Error::config("model.channels", "the shapes dataset is RGB (3)"));
        }
        if self.model.num_classes > PROTOTYPES.len() {
            return Err(Error::config(
                "model.num_classes",
                format!("the shapes dataset has {} classes", PROTOTYPES.len()),
            ));
        }
        if self.model.image_size < 8 {
            return Err(Error::config("model.image_size", "shapes images need >= 8 pixels"));
        }
        if self.data.train_size == 0 {
            return Err(Error::config("data.train_size", "must be >= 1"));
        }
        if self.data.val_size == 0 {
            return Err(Error::config("data.val_size", "must be >= 1"));
        }
        if self.data.max_objects == 0 {
            return Err(Error::config("data.max_objects", "must be >= 1"));
        }
        Ok(())
    }

    pub fn train_data(&self) -> ShapesConfig {
        self.shapes(self.data.seed, self.data.train_size)
    }

    pub fn val_data(&self) -> ShapesConfig {
        self.shapes(self.data.seed.wrapping_add(VAL_SEED_OFFSET), self.data.val_size)
    }

    fn shapes(&self, seed: u64, n: usize) -> ShapesConfig {
        ShapesConfig {
            seed,
            n_samples: n,
            num_classes: self.model.num_classes,
            image_size: self.model.image_size,
            max_objects: self.data.max_objects,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn partial_model_fills_from_preset() {
        let cfg = RunConfig::from_json(r#"{"model": {"groups": 4}}"#).unwrap();
        assert_eq!(cfg.model, ModelConfig { groups: 4, ..ModelConfig::desk() });
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"optim": {"lr": 0.1, "learning_rate": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn field_level_messages() {
        let err = RunConfig::from_json(r#"{"optim": {"batch_size": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "optim.batch_size"));
        let err = RunConfig::from_json(r#"{"model": {"image_size": 32, "channels": 3, "patch_size": 2,
            "dims": [16, 30, 64, 64], "patch_modules": [1,1,1,1], "cross_modules": [1,1,1,1],
            "num_classes": 8, "k": 9, "groups": 4}}"#)
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.dims"));
    }

    #[test]
    fn schedule() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(100, 1), 0.5e-3);
        assert_eq!(o.lr_at(200, 1), 1e-3);
        assert_eq!(o.lr_at(5000, 15), 1e-3);
        assert!((o.lr_at(5000, 16) - 1e-4).abs() < 1e-18);
        assert!((o.lr_at(5000, 26) - 1e-5).abs() < 1e-18);
    }
}
