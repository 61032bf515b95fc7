//! Flat TOML configuration. Every key is optional; missing keys take the
//! defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::SgnsConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sinkhorn::SinkhornConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// JSONL corpus (`id`, `text`, optional `label`).
    pub corpus_path: Option<String>,
    /// JSON seed file (group -> document ids). Seeds are sampled when absent.
    pub seeds_path: Option<String>,
    pub stopword_file: Option<String>,
    pub min_count: u64,
    pub seed_k: usize,
    pub rng_seed: u64,

    pub embed_dim: usize,
    pub embed_window: usize,
    pub embed_negatives: usize,
    pub embed_epochs: usize,
    pub embed_lr: f64,

    /// 0 means one topic per seed group.
    pub num_topics: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
    pub kappa_cap: f64,

    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub thresh: f64,
    pub tau: f64,
    pub lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus_path: None,
            seeds_path: None,
            stopword_file: None,
            min_count: 20,
            seed_k: 5,
            rng_seed: 0,
            embed_dim: 100,
            embed_window: 5,
            embed_negatives: 5,
            embed_epochs: 10,
            embed_lr: 0.025,
            num_topics: 0,
            hidden1: 256,
            hidden2: 64,
            dropout: 0.5,
            kappa_cap: 10.0,
            lambda: 50.0,
            alpha: 10.0,
            beta: 10.0,
            thresh: 0.0,
            tau: 1.0,
            lr: 0.002,
            max_lr: 0.01,
            final_lr: 2e-5,
            warmup_fraction: 0.3,
            batch_size: 256,
            stage1_epochs: 50,
            stage2_epochs: 10,
            stage3_epochs: 10,
            sinkhorn_max_iter: 1000,
            sinkhorn_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_lr", self.embed_lr),
            ("kappa_cap", self.kappa_cap),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("lr", self.lr),
            ("max_lr", self.max_lr),
            ("final_lr", self.final_lr),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.thresh) {
            return Err(Error::Config(format!("thresh {} outside [-1, 1]", self.thresh)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(self.final_lr <= self.lr && self.lr <= self.max_lr) {
            return Err(Error::Config(
                "learning rates must satisfy final_lr <= lr <= max_lr".into(),
            ));
        }
        let counts = [
            ("min_count", self.min_count as usize),
            ("seed_k", self.seed_k),
            ("embed_dim", self.embed_dim),
            ("embed_epochs", self.embed_epochs),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("batch_size", self.batch_size),
            ("stage1_epochs", self.stage1_epochs),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_topics == 1 {
            return Err(Error::Config(
                "num_topics must be 0 (one per group) or at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn sgns(&self) -> SgnsConfig {
        SgnsConfig {
            dim: self.embed_dim,
            window: self.embed_window,
            negatives: self.embed_negatives,
            epochs: self.embed_epochs,
            learning_rate: self.embed_lr,
            rng_seed: self.rng_seed,
        }
    }

    pub fn model(&self, num_groups: usize) -> ModelConfig {
        ModelConfig {
            num_topics: if self.num_topics == 0 {
                num_groups
            } else {
                self.num_topics
            },
            hidden: [self.hidden1, self.hidden2],
            dropout: self.dropout,
            kappa_cap: self.kappa_cap,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            lambda: self.lambda,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
        }
    }
}
