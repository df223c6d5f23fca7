//! Training configuration: every optimization hyperparameter plus the
//! environment and corruption knobs, with validation and a flat key-value
//! file format.
//!
//! File format: one `key = value` per line, `#` starts a comment, unknown
//! keys are errors. Every key has a default, so a config file only lists
//! overrides. `to_canonical_string` renders all keys in fixed order; its
//! git-style hash stamps checkpoints and manifests.

use crate::env::CorruptionConfig;
use crate::hash::git_blob_hash;
use crate::policy::ModelConfig;
use crate::env::SLOT_WIDTH;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// responses sampled per question (G)
    pub group_size: usize,
    /// samples rolled out per training step
    pub rollout_batch: usize,
    /// samples per optimizer step inside an update epoch
    pub train_batch: usize,
    /// passes over the rollout data per training step
    pub update_epochs: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    /// caption-consistency coefficient
    pub alpha: f64,
    /// advantage-weighting coefficient
    pub beta: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// rollout sampling temperature (training log-probs always use 1)
    pub temperature: f64,
    pub t_max: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub detach_caption_branch: bool,
    pub checkpoint_every: usize,
    // environment
    pub k_max: usize,
    pub p_attr: f64,
    pub noise_sigma: f64,
    pub caption_p_attr: f64,
    // model
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// variance guard for both z-score normalizations
    pub var_tol: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            group_size: 8,
            rollout_batch: 64,
            train_batch: 32,
            update_epochs: 2,
            learning_rate: 1.0,
            clip_epsilon: 0.2,
            alpha: 0.01,
            beta: 0.1,
            w_min: 0.5,
            w_max: 1.5,
            temperature: 1.0,
            t_max: 24,
            total_steps: 300,
            seed: 42,
            detach_caption_branch: false,
            checkpoint_every: 50,
            k_max: 6,
            p_attr: 0.3,
            noise_sigma: 0.25,
            caption_p_attr: 0.0,
            embed_dim: 32,
            hidden_dim: 64,
            var_tol: 1e-8,
        }
    }
}

const KEYS: &[&str] = &[
    "group_size",
    "rollout_batch",
    "train_batch",
    "update_epochs",
    "learning_rate",
    "clip_epsilon",
    "alpha",
    "beta",
    "w_min",
    "w_max",
    "temperature",
    "t_max",
    "total_steps",
    "seed",
    "detach_caption_branch",
    "checkpoint_every",
    "k_max",
    "p_attr",
    "noise_sigma",
    "caption_p_attr",
    "embed_dim",
    "hidden_dim",
    "var_tol",
];

impl TrainingConfig {
    pub fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            p_attr: self.p_attr,
            noise_sigma: self.noise_sigma,
            caption_p_attr: self.caption_p_attr,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            feat_dim: self.k_max * SLOT_WIDTH,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            t_max: self.t_max,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        match key {
            "group_size" => self.group_size = p(value)?,
            "rollout_batch" => self.rollout_batch = p(value)?,
            "train_batch" => self.train_batch = p(value)?,
            "update_epochs" => self.update_epochs = p(value)?,
            "learning_rate" => self.learning_rate = p(value)?,
            "clip_epsilon" => self.clip_epsilon = p(value)?,
            "alpha" => self.alpha = p(value)?,
            "beta" => self.beta = p(value)?,
            "w_min" => self.w_min = p(value)?,
            "w_max" => self.w_max = p(value)?,
            "temperature" => self.temperature = p(value)?,
            "t_max" => self.t_max = p(value)?,
            "total_steps" => self.total_steps = p(value)?,
            "seed" => self.seed = p(value)?,
            "detach_caption_branch" => self.detach_caption_branch = p(value)?,
            "checkpoint_every" => self.checkpoint_every = p(value)?,
            "k_max" => self.k_max = p(value)?,
            "p_attr" => self.p_attr = p(value)?,
            "noise_sigma" => self.noise_sigma = p(value)?,
            "caption_p_attr" => self.caption_p_attr = p(value)?,
            "embed_dim" => self.embed_dim = p(value)?,
            "hidden_dim" => self.hidden_dim = p(value)?,
            "var_tol" => self.var_tol = p(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "group_size" => self.group_size.to_string(),
            "rollout_batch" => self.rollout_batch.to_string(),
            "train_batch" => self.train_batch.to_string(),
            "update_epochs" => self.update_epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "clip_epsilon" => self.clip_epsilon.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "w_min" => self.w_min.to_string(),
            "w_max" => self.w_max.to_string(),
            "temperature" => self.temperature.to_string(),
            "t_max" => self.t_max.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "seed" => self.seed.to_string(),
            "detach_caption_branch" => self.detach_caption_branch.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "k_max" => self.k_max.to_string(),
            "p_attr" => self.p_attr.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "caption_p_attr" => self.caption_p_attr.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "var_tol" => self.var_tol.to_string(),
            _ => unreachable!("key list is fixed"),
        }
    }

    /// All keys in fixed order; the manifest copy and the hashed identity.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        git_blob_hash(self.to_canonical_string().as_bytes())
    }

    pub fn from_str_content(content: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainingConfig::default();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse {
                    line: idx + 1,
                    msg: format!("expected `key = value`, got `{raw}`"),
                })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| ConfigError::Parse { line: idx + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let content = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_content(&content)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.rollout_batch < 1 || self.train_batch < 1 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.train_batch > self.rollout_batch {
            return bad(format!(
                "train_batch {} must be <= rollout_batch {}",
                self.train_batch, self.rollout_batch
            ));
        }
        if self.update_epochs < 1 {
            return bad("update_epochs must be >= 1".into());
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must be in (0,1), got {}", self.clip_epsilon));
        }
        if !(self.w_min > 0.0 && self.w_min <= 1.0 && self.w_max >= 1.0) {
            return bad(format!(
                "weight bounds need 0 < w_min <= 1 <= w_max, got {} / {}",
                self.w_min, self.w_max
            ));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.t_max < 1 {
            return bad("t_max must be >= 1".into());
        }
        if self.total_steps < 1 {
            return bad("total_steps must be >= 1".into());
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if !(1..=9).contains(&self.k_max) {
            return bad(format!("k_max must be in 1..=9, got {}", self.k_max));
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 {
            return bad("model dims must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.var_tol > 0.0) {
            return bad("var_tol must be > 0".into());
        }
        self.corruption().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
