//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Later keys
//! override earlier ones; command-line flags are applied on top by the CLI.

use std::path::Path;

use crate::attention::Strategy;
use crate::checkpoint::{digest, hex};
use crate::error::{Error, Result};
use crate::gaussian::DEFAULT_SAMPLES;
use crate::model::ModelConfig;
use crate::runtime::{OnlineConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub samples: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_clip(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn fmt_clip(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |c| c.to_string())
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "t_obs",
        "t_pred",
        "kernel",
        "stack_layers",
        "agent_taps",
        "epochs",
        "batch_size",
        "lr",
        "lr_after",
        "lr_drop_epoch",
        "train_clip_norm",
        "online_lr",
        "clip_norm",
        "updates_per_instance",
        "max_instances",
        "alignment",
        "strategy",
        "rr_checkpoints",
        "rr_window",
        "hedge_beta",
        "hedge_smoothing",
        "explode_threshold",
        "vanish_threshold",
        "vanish_run",
        "samples",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
                self.online.seed = self.seed;
            }
            "t_obs" => self.model.t_obs = parse(key, v)?,
            "t_pred" => self.model.t_pred = parse(key, v)?,
            "kernel" => self.model.kernel = v.parse()?,
            "stack_layers" => self.model.stack.layers = parse(key, v)?,
            "agent_taps" => self.model.stack.agent_taps = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "lr_after" => self.train.lr_after = parse(key, v)?,
            "lr_drop_epoch" => self.train.lr_drop_epoch = parse(key, v)?,
            "train_clip_norm" => self.train.clip_norm = parse_clip(key, v)?,
            "online_lr" => self.online.lr = parse(key, v)?,
            "clip_norm" => self.online.clip_norm = parse_clip(key, v)?,
            "updates_per_instance" => self.online.updates_per_instance = parse(key, v)?,
            "max_instances" => self.online.max_instances = parse(key, v)?,
            "alignment" => self.online.alignment = v.parse()?,
            "strategy" => self.online.strategy = v.parse::<Strategy>()?,
            "rr_checkpoints" => {
                self.online.rr_checkpoints = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "rr_window" => self.online.rr_window = parse(key, v)?,
            "hedge_beta" => self.online.hedge_beta = parse(key, v)?,
            "hedge_smoothing" => self.online.hedge_smoothing = parse(key, v)?,
            "explode_threshold" => self.online.health.explode = parse(key, v)?,
            "vanish_threshold" => self.online.health.vanish = parse(key, v)?,
            "vanish_run" => self.online.health.vanish_run = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, source_name)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.online.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key in fixed order; parsing this text reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let o = &self.online;
        let rr: Vec<String> = o.rr_checkpoints.iter().map(usize::to_string).collect();
        let values = [
            self.seed.to_string(),
            m.t_obs.to_string(),
            m.t_pred.to_string(),
            m.kernel.to_string(),
            m.stack.layers.to_string(),
            m.stack.agent_taps.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.lr_after.to_string(),
            t.lr_drop_epoch.to_string(),
            fmt_clip(t.clip_norm),
            o.lr.to_string(),
            fmt_clip(o.clip_norm),
            o.updates_per_instance.to_string(),
            o.max_instances.to_string(),
            o.alignment.to_string(),
            o.strategy.to_string(),
            rr.join(","),
            o.rr_window.to_string(),
            o.hedge_beta.to_string(),
            o.hedge_smoothing.to_string(),
            o.health.explode.to_string(),
            o.health.vanish.to_string(),
            o.health.vanish_run.to_string(),
            self.samples.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn digest(&self) -> String {
        hex(&digest(&self.to_text()))
    }
}
