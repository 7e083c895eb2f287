//! `key=value` run configuration covering the model and the training loop.

use std::path::Path;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// `synthetic`, `mnist`, `fashion-mnist` or `cifar10`.
    pub dataset: String,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    /// Held-out share of the synthetic data.
    pub test_fraction: f64,
    /// Caps on the number of samples used; 0 means all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub augment: AugmentConfig,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 10,
            warmup_epochs: 5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            dataset: "synthetic".into(),
            synthetic_classes: 4,
            synthetic_per_class: 256,
            synthetic_size: 16,
            test_fraction: 0.25,
            train_limit: 0,
            test_limit: 0,
            augment: AugmentConfig { pad: 0, random_crop: false, hflip: false, seed: 0 },
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, beta1: self.betas.0, beta2: self.betas.1, eps: self.eps }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("invalid value '{value}' for {key}"));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        match key {
            "lr" => self.lr = real()?,
            "weight_decay" => self.weight_decay = real()?,
            "batch_size" => self.batch_size = num()?,
            "epochs" => self.epochs = num()?,
            "warmup_epochs" => self.warmup_epochs = num()?,
            "beta1" => self.betas.0 = real()?,
            "beta2" => self.betas.1 = real()?,
            "eps" => self.eps = real()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "dataset" => self.dataset = value.to_string(),
            "synthetic_classes" => self.synthetic_classes = num()?,
            "synthetic_per_class" => self.synthetic_per_class = num()?,
            "synthetic_size" => self.synthetic_size = num()?,
            "test_fraction" => self.test_fraction = real()?,
            "train_limit" => self.train_limit = num()?,
            "test_limit" => self.test_limit = num()?,
            "eval_batch" => self.eval_batch = num()?,
            "augment_pad" => self.augment.pad = num()?,
            "augment_crop" => self.augment.random_crop = flag()?,
            "augment_hflip" => self.augment.hflip = flag()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.warmup_epochs > self.epochs {
            return err(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return err("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return err(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }
}

/// Model plus training settings, as read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::shallow_synthetic(4), train: TrainConfig::default() }
    }
}

impl RunConfig {
    /// Keys are matched against the model first, then the trainer. A
    /// `variant` or `dataset` key picks the defaults the other keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let mut cfg = Self::default();
        if let Some(ds) = get("dataset") {
            cfg.model = default_model_for(ds, get("variant"))?;
        } else if let Some(v) = get("variant") {
            cfg.model = ModelConfig::for_variant(v.parse()?);
        }
        for (k, v) in &pairs {
            if !cfg.model.set(k, v)? && !cfg.train.set(k, v)? {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Architecture defaults matching a dataset's image shape.
pub fn default_model_for(dataset: &str, variant: Option<&str>) -> Result<ModelConfig> {
    let deep = match variant {
        Some(v) => v.parse::<crate::model::Variant>()? == crate::model::Variant::Deep,
        None => false,
    };
    Ok(match (dataset, deep) {
        ("mnist" | "fashion-mnist" | "fashion", false) => ModelConfig::shallow_mnist(),
        ("mnist" | "fashion-mnist" | "fashion", true) => {
            ModelConfig { input: (1, 28, 28), ..ModelConfig::deep_cifar10() }
        }
        ("cifar10" | "cifar-10", false) => ModelConfig::shallow_cifar10(),
        ("cifar10" | "cifar-10", true) => ModelConfig::deep_cifar10(),
        ("synthetic", false) => ModelConfig::shallow_synthetic(4),
        ("synthetic", true) => ModelConfig {
            input: (1, 16, 16),
            classes: 4,
            backbone: vec![crate::model::ConvSpec::new(16, 3, 1, 1), crate::model::ConvSpec::new(32, 3, 1, 1)],
            blocks: 4,
            downsample: vec![1, 3],
            ..ModelConfig::deep_cifar10()
        },
        (other, _) => return Err(Error::Config(format!("unknown dataset '{other}'"))),
    })
}
