//! `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::InitDistribution;
use crate::optim::{MuSchedule, OptimizerConfig, OptimizerKind};
use crate::unet::UNetSpec;

/// Splits `key = value` lines, keeping order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected 'key = value', got '{raw}'", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Format(format!("config line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub nu: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub loss: LossKind,
    /// Epochs without improvement before the one-time learning-rate reduction.
    pub patience: usize,
    pub min_delta: f64,
    pub lr_factor: f64,
    /// Epochs without improvement, after the reduction, before stopping.
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Expected train fraction of the dataset.
    pub split: f64,
    pub filter_divisor: usize,
    pub leak: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub init: InitDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = UNetSpec::default();
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            optimizer: OptimizerKind::Nadam,
            beta1: 0.9,
            beta2: 0.999,
            nu: 0.999,
            mu: 0.9,
            epsilon: 1e-8,
            loss: LossKind::Iou,
            patience: 15,
            min_delta: 1e-6,
            lr_factor: 0.5,
            early_stop_patience: 15,
            early_stop_min_delta: 1e-6,
            max_epochs: 500,
            seed: 0,
            split: 0.7,
            filter_divisor: spec.filter_divisor,
            leak: spec.leak,
            dropout: spec.dropout,
            bn_momentum: spec.bn_momentum,
            init: spec.init,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("config key '{key}': cannot parse '{v}'")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 22] = [
        "lr",
        "batch_size",
        "optimizer",
        "beta1",
        "beta2",
        "nu",
        "mu",
        "epsilon",
        "loss",
        "patience",
        "min_delta",
        "lr_factor",
        "early_stop_patience",
        "early_stop_min_delta",
        "max_epochs",
        "seed",
        "split",
        "filter_divisor",
        "leak",
        "dropout",
        "bn_momentum",
        "init",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "nu" => self.nu = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "loss" => self.loss = v.parse()?,
            "patience" => self.patience = num(key, v)?,
            "min_delta" => self.min_delta = num(key, v)?,
            "lr_factor" => self.lr_factor = num(key, v)?,
            "early_stop_patience" => self.early_stop_patience = num(key, v)?,
            "early_stop_min_delta" => self.early_stop_min_delta = num(key, v)?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "split" => self.split = num(key, v)?,
            "filter_divisor" => self.filter_divisor = num(key, v)?,
            "leak" => self.leak = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "bn_momentum" => self.bn_momentum = num(key, v)?,
            "init" => self.init = v.parse()?,
            _ => return Err(Error::Format(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key, in a form [`TrainConfig::parse`] reads back exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lr", format!("{:?}", self.lr));
        put("batch_size", self.batch_size.to_string());
        put("optimizer", format!("{:?}", self.optimizer).to_lowercase());
        put("beta1", format!("{:?}", self.beta1));
        put("beta2", format!("{:?}", self.beta2));
        put("nu", format!("{:?}", self.nu));
        put("mu", format!("{:?}", self.mu));
        put("epsilon", format!("{:?}", self.epsilon));
        put("loss", self.loss.name().to_string());
        put("patience", self.patience.to_string());
        put("min_delta", format!("{:?}", self.min_delta));
        put("lr_factor", format!("{:?}", self.lr_factor));
        put("early_stop_patience", self.early_stop_patience.to_string());
        put("early_stop_min_delta", format!("{:?}", self.early_stop_min_delta));
        put("max_epochs", self.max_epochs.to_string());
        put("seed", self.seed.to_string());
        put("split", format!("{:?}", self.split));
        put("filter_divisor", self.filter_divisor.to_string());
        put("leak", format!("{:?}", self.leak));
        put("dropout", format!("{:?}", self.dropout));
        put("bn_momentum", format!("{:?}", self.bn_momentum));
        put("init", format!("{:?}", self.init).to_lowercase());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::arg(format!("lr_factor must be in (0, 1), got {}", self.lr_factor)));
        }
        if self.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::arg("patience values must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.min_delta >= 0.0) || !(self.early_stop_min_delta >= 0.0) {
            return Err(Error::arg("min_delta values must be >= 0"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::arg(format!("split must be in (0, 1), got {}", self.split)));
        }
        self.optimizer_config().validate()?;
        self.unet_spec().validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            mu: MuSchedule::Constant(self.mu),
            beta1: self.beta1,
            beta2: self.beta2,
            nu: self.nu,
            epsilon: self.epsilon,
        }
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            leak: self.leak,
            dropout: self.dropout,
            filter_divisor: self.filter_divisor,
            init: self.init,
            seed: self.seed,
            bn_momentum: self.bn_momentum,
            ..UNetSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_keys() {
        let c = TrainConfig::parse("# toy\nlr = 0.001\nbatch_size=8 # small\noptimizer = adam\n\nloss = mse\n").unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.loss, LossKind::Mse);
    }

    #[test]
    fn round_trips() {
        let c = TrainConfig {
            lr: 0.1 + 0.2,
            filter_divisor: 4,
            init: InitDistribution::Normal,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_kv()).unwrap(), c);
        assert_eq!(c.to_kv().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("colour = blue").is_err());
        assert!(TrainConfig::parse("lr 0.1").is_err());
        assert!(TrainConfig::parse("lr_factor = 1.0").is_err());
        assert!(TrainConfig::parse("patience = 0").is_err());
        assert!(TrainConfig::parse("batch_size = -1").is_err());
        assert!(TrainConfig::parse("loss = hinge").is_err());
    }
}
