//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers.
//!
//! ```text
//! # comment
//! [data]
//! family = A
//! degradation = gauss_noise(0.1)
//! [cap]
//! epochs = 60
//! ```
//!
//! Unknown sections or keys are errors. Missing keys keep their defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DatasetSpec, DegradationOp, Family};
use crate::models::{LambdaSchedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub base: TrainConfig,
    pub cap: TrainConfig,
    pub scratch: TrainConfig,
    pub autoencoder: TrainConfig,
    pub passes: usize,
    pub dropout_p: f64,
    pub bins: usize,
    pub ssim_window: usize,
    pub kappas: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Images per family in the OOD experiment.
    pub ood_count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = |epochs, lr, width| TrainConfig { epochs, lr, width, ..TrainConfig::default() };
        Self {
            data: DatasetSpec::new(Family::A, 200, DegradationOp::GaussNoise { sigma: 0.1 }, 0),
            base: train(60, 2e-3, 16),
            cap: train(60, 3e-3, 16),
            scratch: train(60, 3e-3, 16),
            autoencoder: train(30, 2e-3, 32),
            passes: 20,
            dropout_p: 0.2,
            bins: 100,
            ssim_window: 8,
            kappas: vec![0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15],
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            ood_count: 60,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line: n + 1, msg: "unterminated section".into() })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: n + 1, msg: format!("expected key = value, got `{line}`") })?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            cfg.set(&key, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let verr = |msg: String| ConfigError::Value { key: key.into(), msg };
        if let Some((sec, field)) = key.split_once('.') {
            let train = match sec {
                "base" => Some(&mut self.base),
                "cap" => Some(&mut self.cap),
                "scratch" => Some(&mut self.scratch),
                "autoencoder" => Some(&mut self.autoencoder),
                _ => None,
            };
            if let Some(t) = train {
                match field {
                    "epochs" => t.epochs = parse_num(key, v)?,
                    "batch_size" => t.batch_size = parse_num(key, v)?,
                    "lr" => t.lr = parse_num(key, v)?,
                    "width" | "bottleneck" => t.width = parse_num(key, v)?,
                    "lambda0" | "lambda_decay" if sec == "cap" => {
                        let (mut l0, mut g) = match t.lambda {
                            LambdaSchedule::Anneal { lambda0, decay } => (lambda0, decay),
                            LambdaSchedule::Constant(l) => (l, 0.85),
                        };
                        if field == "lambda0" {
                            l0 = parse_num(key, v)?;
                        } else {
                            g = parse_num(key, v)?;
                        }
                        t.lambda = LambdaSchedule::Anneal { lambda0: l0, decay: g };
                    }
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                return Ok(());
            }
        }
        match key {
            "data.family" => self.data.family = v.parse().map_err(|e: crate::data::DataError| verr(e.to_string()))?,
            "data.count" => self.data.count = parse_num(key, v)?,
            "data.size" => self.data.size = parse_num(key, v)?,
            "data.degradation" => {
                self.data.degradation = v.parse().map_err(|e: crate::data::DataError| verr(e.to_string()))?
            }
            "data.splits" => {
                let f = parse_list(key, v)?;
                if f.len() != 3 {
                    return Err(verr("expected three fractions".into()));
                }
                self.data.splits = (f[0], f[1], f[2]);
            }
            "baselines.passes" => self.passes = parse_num(key, v)?,
            "baselines.dropout" => self.dropout_p = parse_num(key, v)?,
            "metrics.bins" => self.bins = parse_num(key, v)?,
            "metrics.ssim_window" => self.ssim_window = parse_num(key, v)?,
            "sweeps.kappas" => self.kappas = parse_list(key, v)?,
            "sweeps.fractions" => self.fractions = parse_list(key, v)?,
            "ood.count" => self.ood_count = parse_num(key, v)?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(ConfigError::Value { key: key.into(), msg });
        self.data.validate().map_err(|e| ConfigError::Value { key: "data".into(), msg: e.to_string() })?;
        for (name, t) in [("base", &self.base), ("cap", &self.cap), ("scratch", &self.scratch), ("autoencoder", &self.autoencoder)] {
            t.validate().map_err(|e| ConfigError::Value { key: name.into(), msg: e.to_string() })?;
        }
        if self.passes == 0 {
            return bad("baselines.passes", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("baselines.dropout", format!("{} outside [0,1)", self.dropout_p));
        }
        if self.bins == 0 {
            return bad("metrics.bins", "must be positive".into());
        }
        if self.ssim_window == 0 || self.ssim_window > self.data.size {
            return bad("metrics.ssim_window", format!("{} does not fit {}px images", self.ssim_window, self.data.size));
        }
        if let Some(k) = self.kappas.iter().find(|k| !(**k >= 0.0 && k.is_finite())) {
            return bad("sweeps.kappas", format!("{k} must be non-negative"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad("sweeps.fractions", format!("{f} outside (0,1]"));
        }
        if self.ood_count < 2 {
            return bad("ood.count", "need at least 2 images per family".into());
        }
        Ok(())
    }

    /// Canonical text form; every key with its effective value.
    pub fn canonical(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        m.insert("data.family".into(), self.data.family.to_string());
        m.insert("data.count".into(), self.data.count.to_string());
        m.insert("data.size".into(), self.data.size.to_string());
        m.insert("data.degradation".into(), self.data.degradation.to_string());
        m.insert("data.splits".into(), format!("{},{},{}", self.data.splits.0, self.data.splits.1, self.data.splits.2));
        for (name, t) in [("base", &self.base), ("cap", &self.cap), ("scratch", &self.scratch), ("autoencoder", &self.autoencoder)] {
            m.insert(format!("{name}.epochs"), t.epochs.to_string());
            m.insert(format!("{name}.batch_size"), t.batch_size.to_string());
            m.insert(format!("{name}.lr"), t.lr.to_string());
            m.insert(format!("{name}.width"), t.width.to_string());
        }
        if let LambdaSchedule::Anneal { lambda0, decay } = self.cap.lambda {
            m.insert("cap.lambda0".into(), lambda0.to_string());
            m.insert("cap.lambda_decay".into(), decay.to_string());
        }
        m.insert("baselines.passes".into(), self.passes.to_string());
        m.insert("baselines.dropout".into(), self.dropout_p.to_string());
        m.insert("metrics.bins".into(), self.bins.to_string());
        m.insert("metrics.ssim_window".into(), self.ssim_window.to_string());
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        m.insert("sweeps.kappas".into(), list(&self.kappas));
        m.insert("sweeps.fractions".into(), list(&self.fractions));
        m.insert("ood.count".into(), self.ood_count.to_string());
        m.insert("run.seed".into(), self.seed.to_string());
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
