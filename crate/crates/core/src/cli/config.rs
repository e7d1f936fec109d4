//! `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::SYNTH_VALIDATION_FRACTION;
use crate::error::{Error, Result};
use crate::models::{BinDannConfig, SaeConfig};
use crate::optim::OptimizerKind;
use crate::similarity::{AutoConfig, DEFAULT_H_PREC, DEFAULT_RHO_TH};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

impl OptimizerChoice {
    fn name(self) -> &'static str {
        match self {
            OptimizerChoice::Adam => "adam",
            OptimizerChoice::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub patch_h: usize,
    pub patch_w: usize,
    pub depth: usize,
    pub filters: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub lambda0: f64,
    pub lambda_inc: f64,
    pub h_prec: f64,
    pub rho_th: f64,
    pub sweep_step: f64,
    pub validation_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sae = SaeConfig::default();
        let dann = BinDannConfig::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            source_dir: None,
            target_dir: None,
            patch_h: sae.patch.0,
            patch_w: sae.patch.1,
            depth: sae.depth,
            filters: sae.filters,
            dropout: sae.dropout_rate,
            epochs: train.epochs,
            batch: train.batch,
            seed: train.seed,
            lr: train.learning_rate,
            optimizer: OptimizerChoice::Adam,
            lambda0: dann.lambda0,
            lambda_inc: dann.lambda_increment,
            h_prec: DEFAULT_H_PREC,
            rho_th: DEFAULT_RHO_TH,
            sweep_step: train.sweep_step,
            validation_fraction: SYNTH_VALIDATION_FRACTION,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source_dir" => self.source_dir = Some(PathBuf::from(value)),
            "target_dir" => self.target_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "patch_h" => self.patch_h = parse_value(key, value)?,
            "patch_w" => self.patch_w = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "filters" => self.filters = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lambda0" => self.lambda0 = parse_value(key, value)?,
            "lambda_inc" => self.lambda_inc = parse_value(key, value)?,
            "h_prec" => self.h_prec = parse_value(key, value)?,
            "rho_th" => self.rho_th = parse_value(key, value)?,
            "sweep_step" => self.sweep_step = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    _ => return Err(Error::Config(format!("optimizer must be `adam` or `sgd`, got `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every downstream invariant, reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            self.auto_config().validate()?;
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
            }
            if !(0.0..1.0).contains(&self.validation_fraction) {
                return Err(Error::InvalidArgument(format!(
                    "validation_fraction must be in [0, 1), got {}",
                    self.validation_fraction
                )));
            }
            Ok(())
        };
        check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    pub fn sae_config(&self) -> SaeConfig {
        SaeConfig {
            depth: self.depth,
            filters: self.filters,
            dropout_rate: self.dropout,
            patch: (self.patch_h, self.patch_w),
            ..SaeConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            sweep_step: self.sweep_step,
            seed: self.seed,
            optimizer: match self.optimizer {
                OptimizerChoice::Adam => OptimizerKind::adam(),
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
            },
            learning_rate: self.lr,
        }
    }

    pub fn auto_config(&self) -> AutoConfig {
        AutoConfig {
            model: BinDannConfig {
                sae: self.sae_config(),
                lambda0: self.lambda0,
                lambda_increment: self.lambda_inc,
            },
            train: self.train_config(),
            h_prec: self.h_prec,
            rho_th: self.rho_th,
        }
    }

    /// All keys in a fixed order; parsing this text yields the same config.
    pub fn canonical(&self) -> String {
        let rows: [(&str, String); 19] = [
            ("source_dir", path_text(&self.source_dir)),
            ("target_dir", path_text(&self.target_dir)),
            ("out_dir", self.out_dir.display().to_string()),
            ("patch_h", self.patch_h.to_string()),
            ("patch_w", self.patch_w.to_string()),
            ("depth", self.depth.to_string()),
            ("filters", self.filters.to_string()),
            ("dropout", self.dropout.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("lambda0", self.lambda0.to_string()),
            ("lambda_inc", self.lambda_inc.to_string()),
            ("h_prec", self.h_prec.to_string()),
            ("rho_th", self.rho_th.to_string()),
            ("sweep_step", self.sweep_step.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
        ];
        rows.iter()
            .filter(|(k, v)| !(v.is_empty() && k.ends_with("_dir")))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text without `out_dir`, so the same
    /// experiment written to two places hashes identically.
    pub fn hash(&self) -> String {
        let text: String = self.canonical().lines().filter(|l| !l.starts_with("out_dir=")).map(|l| format!("{l}\n")).collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require_source(&self) -> Result<&Path> {
        self.source_dir.as_deref().ok_or_else(|| Error::Config("source_dir is not set".into()))
    }

    pub fn require_target(&self) -> Result<&Path> {
        self.target_dir.as_deref().ok_or_else(|| Error::Config("target_dir is not set".into()))
    }
}
