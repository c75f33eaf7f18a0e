//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::data::DatasetSpec;
use crate::hfqe::{DEFAULT_K_RATIO, DEFAULT_Q};
use crate::losses::{
    LossWeights, DEFAULT_OIM_TEMPERATURE, DEFAULT_PROXY_MOMENTUM, DEFAULT_QUEUE_CAPACITY,
};
use crate::tokens::DEFAULT_EXCHANGE_RATIO;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DatasetSpec,
    pub steps: usize,
    /// Leading steps that run only the first cascade stage.
    pub stage1_steps: usize,
    pub ids_per_batch: usize,
    pub samples_per_id_batch: usize,
    pub unlabeled_per_batch: usize,
    pub background_per_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub k_ratio: f64,
    pub proxy_momentum: f64,
    pub q: f64,
    pub hfqe: bool,
    pub lambda_oim: f64,
    pub lambda_id: f64,
    pub lambda_p: f64,
    pub oim_temperature: f64,
    pub oim_momentum: f64,
    /// Multiplier on unit embeddings before the identity classifier.
    pub id_scale: f64,
    pub queue_capacity: usize,
    pub exchange_ratio: f64,
    pub channels: usize,
    pub slices: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DatasetSpec::default(),
            steps: 500,
            stage1_steps: 20,
            ids_per_batch: 8,
            samples_per_id_batch: 2,
            unlabeled_per_batch: 2,
            background_per_batch: 2,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 2.0,
            k_ratio: DEFAULT_K_RATIO,
            proxy_momentum: DEFAULT_PROXY_MOMENTUM,
            q: DEFAULT_Q,
            hfqe: true,
            lambda_oim: 1.0,
            lambda_id: 1.0,
            lambda_p: 0.03,
            oim_temperature: DEFAULT_OIM_TEMPERATURE,
            oim_momentum: 0.5,
            id_scale: 10.0,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            exchange_ratio: DEFAULT_EXCHANGE_RATIO,
            channels: 8,
            slices: 4,
            blocks: 1,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse {key}={value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "cannot parse {key}={value} as a boolean"
        ))),
    }
}

impl TrainConfig {
    /// Validates counts and ranges.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let positive = [
            ("steps", self.steps),
            ("ids_per_batch", self.ids_per_batch),
            ("samples_per_id_batch", self.samples_per_id_batch),
            ("channels", self.channels),
            ("slices", self.slices),
            ("blocks", self.blocks),
            ("queue_capacity", self.queue_capacity),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{k} must be positive")));
            }
        }
        if self.ids_per_batch > self.data.n_ids {
            return Err(Error::InvalidArgument(format!(
                "ids_per_batch {} exceeds {} identities",
                self.ids_per_batch, self.data.n_ids
            )));
        }
        if self.samples_per_id_batch > self.data.train_per_id() {
            return Err(Error::InvalidArgument(format!(
                "samples_per_id_batch {} exceeds {} training samples per identity",
                self.samples_per_id_batch,
                self.data.train_per_id()
            )));
        }
        if self.unlabeled_per_batch > 0
            && self.data.unlabeled_ids * self.data.unlabeled_samples_per_id == 0
        {
            return Err(Error::InvalidArgument(
                "unlabeled samples requested but none generated".into(),
            ));
        }
        if !self.channels.is_multiple_of(self.slices) {
            return Err(Error::InvalidArgument(format!(
                "channels {} not divisible by slices {}",
                self.channels, self.slices
            )));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "k={} outside (0, 1]",
                self.k_ratio
            )));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "q={} must be positive",
                self.q
            )));
        }
        if !(0.0..=1.0).contains(&self.exchange_ratio) || !(0.0..=1.0).contains(&self.oim_momentum)
        {
            return Err(Error::InvalidArgument(
                "exchange_ratio and oim_momentum must lie in [0, 1]".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
            || !(self.clip_norm >= 0.0)
        {
            return Err(Error::InvalidArgument("invalid optimizer settings".into()));
        }
        if !(self.oim_temperature > 0.0) || !(self.id_scale > 0.0 && self.id_scale.is_finite()) {
            return Err(Error::InvalidArgument(
                "oim_temperature and id_scale must be positive".into(),
            ));
        }
        self.loss_weights().map(|_| ())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(
            self.lambda_oim,
            self.lambda_id,
            self.lambda_p,
            self.proxy_momentum,
        )
    }

    /// The ablation used for comparison: no augmentation loss, no quantization.
    pub fn ablated(&self) -> Self {
        TrainConfig {
            lambda_p: 0.0,
            hfqe: false,
            ..self.clone()
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "n_ids" => self.data.n_ids = parse(key, value)?,
            "samples_per_id" => self.data.samples_per_id = parse(key, value)?,
            "patch_size" => self.data.patch_size = parse(key, value)?,
            "gallery_per_id" => self.data.gallery_per_id = parse(key, value)?,
            "query_per_id" => self.data.query_per_id = parse(key, value)?,
            "unlabeled_ids" => self.data.unlabeled_ids = parse(key, value)?,
            "unlabeled_samples_per_id" => self.data.unlabeled_samples_per_id = parse(key, value)?,
            "noise_sigma" => self.data.noise_sigma = parse(key, value)?,
            "data_seed" => self.data.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "stage1_steps" => self.stage1_steps = parse(key, value)?,
            "ids_per_batch" => self.ids_per_batch = parse(key, value)?,
            "samples_per_id_batch" => self.samples_per_id_batch = parse(key, value)?,
            "unlabeled_per_batch" => self.unlabeled_per_batch = parse(key, value)?,
            "background_per_batch" => self.background_per_batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "k" => self.k_ratio = parse(key, value)?,
            "lambda" => self.proxy_momentum = parse(key, value)?,
            "q" => self.q = parse(key, value)?,
            "hfqe" => self.hfqe = parse_bool(key, value)?,
            "lambda_oim" => self.lambda_oim = parse(key, value)?,
            "lambda_id" => self.lambda_id = parse(key, value)?,
            "lambda_p" => self.lambda_p = parse(key, value)?,
            "oim_temperature" => self.oim_temperature = parse(key, value)?,
            "oim_momentum" => self.oim_momentum = parse(key, value)?,
            "id_scale" => self.id_scale = parse(key, value)?,
            "queue_capacity" => self.queue_capacity = parse(key, value)?,
            "exchange_ratio" => self.exchange_ratio = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "slices" => self.slices = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected key=value", n + 1))
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key, in a form [`parse_str`](Self::parse_str) reads back exactly.
    pub fn to_kv(&self) -> String {
        let d = &self.data;
        let pairs: [(&str, String); 35] = [
            ("n_ids", d.n_ids.to_string()),
            ("samples_per_id", d.samples_per_id.to_string()),
            ("patch_size", d.patch_size.to_string()),
            ("gallery_per_id", d.gallery_per_id.to_string()),
            ("query_per_id", d.query_per_id.to_string()),
            ("unlabeled_ids", d.unlabeled_ids.to_string()),
            (
                "unlabeled_samples_per_id",
                d.unlabeled_samples_per_id.to_string(),
            ),
            ("noise_sigma", d.noise_sigma.to_string()),
            ("data_seed", d.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("ids_per_batch", self.ids_per_batch.to_string()),
            (
                "samples_per_id_batch",
                self.samples_per_id_batch.to_string(),
            ),
            ("unlabeled_per_batch", self.unlabeled_per_batch.to_string()),
            (
                "background_per_batch",
                self.background_per_batch.to_string(),
            ),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("k", self.k_ratio.to_string()),
            ("lambda", self.proxy_momentum.to_string()),
            ("q", self.q.to_string()),
            ("hfqe", self.hfqe.to_string()),
            ("lambda_oim", self.lambda_oim.to_string()),
            ("lambda_id", self.lambda_id.to_string()),
            ("lambda_p", self.lambda_p.to_string()),
            ("oim_temperature", self.oim_temperature.to_string()),
            ("oim_momentum", self.oim_momentum.to_string()),
            ("id_scale", self.id_scale.to_string()),
            ("queue_capacity", self.queue_capacity.to_string()),
            ("exchange_ratio", self.exchange_ratio.to_string()),
            ("channels", self.channels.to_string()),
            ("slices", self.slices.to_string()),
            ("blocks", self.blocks.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.k_ratio, c.proxy_momentum, c.q), (0.3, 0.5, 15.0));
        assert_eq!((c.momentum, c.weight_decay, c.lr), (0.9, 5e-4, 0.03));
        c.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_comments() {
        let mut c = TrainConfig::default();
        c.lr = 0.037;
        c.hfqe = false;
        c.data.seed = 99;
        assert_eq!(TrainConfig::parse_str(&c.to_kv()).unwrap(), c);
        let p = TrainConfig::parse_str("# header\nsteps = 12  # short\n\nk=0.5\n").unwrap();
        assert_eq!((p.steps, p.k_ratio), (12, 0.5));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse_str("nonsense=1").is_err());
        assert!(TrainConfig::parse_str("steps").is_err());
        assert!(TrainConfig::parse_str("steps=-3").is_err());
        let bad = TrainConfig::parse_str("k=1.5").unwrap();
        assert!(bad.validate().is_err());
        let bad = TrainConfig::parse_str("lambda=2").unwrap();
        assert!(bad.validate().is_err());
        let bad = TrainConfig::parse_str("q=0").unwrap();
        assert!(bad.validate().is_err());
    }
}
