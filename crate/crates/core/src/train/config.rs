//! Training configuration and its `key = value` text form.

use std::path::{Path, PathBuf};

use crate::dsp::stft::DEFAULT_WINDOW;
use crate::error::{MartError, Result};
use crate::loss::{Ablation, DEFAULT_TAU};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sample_rate: u32,
    pub root_seconds: f64,
    pub tau: f64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Apply stochastic augmentation to both views.
    pub augment: bool,
    pub manifest: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Every accepted key, in the order they are written.
pub const KEYS: &[&str] = &[
    "m",
    "n",
    "sample_rate",
    "root_seconds",
    "frames",
    "mel_bands",
    "d_e",
    "channels",
    "d_t",
    "heads",
    "blocks",
    "head_hidden",
    "contrastive_dim",
    "tau",
    "lambda_down",
    "lambda_up",
    "batch",
    "lr",
    "weight_decay",
    "epochs",
    "seed",
    "ablation",
    "augment",
    "manifest",
    "checkpoint_dir",
];

/// Keys that may differ between a checkpoint and the run resuming from it.
pub const RESUMABLE_KEYS: &[&str] = &["epochs", "manifest", "checkpoint_dir"];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            model: ModelConfig::paper(),
            sample_rate: 16_000,
            root_seconds: 12.8,
            tau: DEFAULT_TAU,
            batch: 48,
            lr: 3e-4,
            weight_decay: 1e-6,
            epochs: 300,
            seed: 0,
            ablation: Ablation::Full,
            augment: true,
            manifest: None,
            checkpoint_dir: None,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            batch: 8,
            epochs: 20,
            ..Self::paper()
        }
    }

    pub fn root_len(&self) -> usize {
        (self.root_seconds * self.sample_rate as f64).round() as usize
    }

    /// Shortest leaf span that still yields the configured frame count.
    pub fn min_leaf(&self) -> usize {
        DEFAULT_WINDOW + self.model.frames - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(MartError::Config(msg));
        if self.sample_rate == 0 || !(self.root_seconds > 0.0) {
            return bad("sample rate and root length must be positive".into());
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        let leaves = self.model.m.pow(self.model.n as u32 - 1);
        let need = leaves * self.min_leaf();
        if self.root_len() < need {
            return bad(format!(
                "root of {} samples is too short for {leaves} leaves of {} frames; need at least {need}",
                self.root_len(),
                self.model.frames
            ));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "m" => m.m.to_string(),
            "n" => m.n.to_string(),
            "sample_rate" => self.sample_rate.to_string(),
            "root_seconds" => self.root_seconds.to_string(),
            "frames" => m.frames.to_string(),
            "mel_bands" => m.mel_bands.to_string(),
            "d_e" => m.d_e().to_string(),
            "channels" => list(&m.channels),
            "d_t" => m.d_t.to_string(),
            "heads" => m.heads.to_string(),
            "blocks" => m.blocks.to_string(),
            "head_hidden" => m.head_hidden.to_string(),
            "contrastive_dim" => m.contrastive_dim.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_down" => list(&m.lambda_down),
            "lambda_up" => list(&m.lambda_up),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.to_string(),
            "augment" => self.augment.to_string(),
            "manifest" => path(&self.manifest),
            "checkpoint_dir" => path(&self.checkpoint_dir),
            _ => return None,
        })
    }

    /// Sets one key from its text value. Changing `m` or `n` resets the
    /// residual scales to one entry per level pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| MartError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn nums<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let m = &mut self.model;
        match key {
            "m" | "n" => {
                let lam_d = m.lambda_down.first().copied().unwrap_or(1.0);
                let lam_u = m.lambda_up.first().copied().unwrap_or(1.0);
                if key == "m" {
                    m.m = num(key, value)?;
                } else {
                    m.n = num(key, value)?;
                }
                m.lambda_down = vec![lam_d; m.pairs()];
                m.lambda_up = vec![lam_u; m.pairs()];
            }
            "sample_rate" => self.sample_rate = num(key, value)?,
            "root_seconds" => self.root_seconds = num(key, value)?,
            "frames" => m.frames = num(key, value)?,
            "mel_bands" => m.mel_bands = num(key, value)?,
            "d_e" => {
                let d: usize = num(key, value)?;
                match m.channels.last_mut() {
                    Some(last) => *last = d,
                    None => m.channels.push(d),
                }
            }
            "channels" => m.channels = nums(key, value)?,
            "d_t" => m.d_t = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "blocks" => m.blocks = num(key, value)?,
            "head_hidden" => m.head_hidden = num(key, value)?,
            "contrastive_dim" => m.contrastive_dim = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lambda_down" | "lambda_up" => {
                let mut v: Vec<f64> = nums(key, value)?;
                if v.len() == 1 {
                    v = vec![v[0]; m.pairs()];
                }
                if key == "lambda_down" {
                    m.lambda_down = v;
                } else {
                    m.lambda_up = v;
                }
            }
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "augment" => self.augment = num(key, value)?,
            "manifest" => self.manifest = path(value),
            "checkpoint_dir" => self.checkpoint_dir = path(value),
            _ => return Err(MartError::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored. Tree shape keys are applied first and
    /// `d_e` last.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MartError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| match k.as_str() {
            "m" | "n" => 0,
            "d_e" => 2,
            _ => 1,
        });
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Desk defaults overridden by the text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MartError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Keys whose values differ between two configurations.
    pub fn differing_keys(&self, other: &TrainConfig) -> Vec<&'static str> {
        KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }
}
