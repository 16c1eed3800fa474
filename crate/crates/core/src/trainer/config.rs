use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization and method hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Confidence gate on the fused pseudo-label probability.
    pub delta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Student temperature of the temporal alignment.
    pub tau_s: f64,
    /// Teacher temperature of the temporal alignment.
    pub tau_t: f64,
    /// Reliability threshold for contrastive positives.
    pub epsilon: f64,
    /// Prototype EMA coefficient.
    pub beta: f64,
    /// Weight of the temporal alignment loss.
    pub mu1: f64,
    /// Weight of the contrastive loss.
    pub mu2: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub clip_len: usize,
    /// Short-clip stride followed by the long-clip strides.
    pub strides: Vec<usize>,
    pub num_scales: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-indexed epochs at which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub epochs: usize,
    pub ema_momentum: f64,
    pub bank_capacity: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            tau: 0.07,
            tau_s: 0.1,
            tau_t: 0.04,
            epsilon: 0.7,
            beta: 0.9,
            mu1: 1.0,
            mu2: 1.0,
            batch_labeled: 1,
            batch_unlabeled: 5,
            clip_len: 8,
            strides: vec![8, 16, 32],
            num_scales: 2,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_drop_epochs: vec![25, 28],
            epochs: 30,
            ema_momentum: 0.99,
            bank_capacity: 512,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, t) in [("tau", self.tau), ("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        // delta = 1 is accepted: it closes the gate entirely.
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must lie in (0, 1]".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)".into());
        }
        for (name, v) in [("beta", self.beta), ("ema_momentum", self.ema_momentum), ("momentum", self.momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.clip_len < 2 {
            return bad("clip_len must be at least 2".into());
        }
        if self.strides.len() < 2 || self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides[0] == 0 {
            return bad(format!("strides must be positive and strictly increasing, got {:?}", self.strides));
        }
        if self.num_scales != self.strides.len() - 1 {
            return bad(format!(
                "num_scales is {} but {} long-clip strides are configured",
                self.num_scales,
                self.strides.len() - 1
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mu1 >= 0.0) || !(self.mu2 >= 0.0) {
            return bad("lr, weight_decay, mu1 and mu2 must be non-negative".into());
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }
}

/// Hidden sizes of the network; input size and class count come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_embed: usize,
    pub d_temporal: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_hidden: 32, d_embed: 16, d_temporal: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.d_embed == 0 || self.d_temporal == 0 {
            return Err(Error::InvalidConfig("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Switches for the two method components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_acl: bool,
    pub use_mtl: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_acl: true, use_mtl: true }
    }
}

impl Ablation {
    pub const ALL: [(&'static str, Ablation); 4] = [
        ("baseline", Ablation { use_acl: false, use_mtl: false }),
        ("acl", Ablation { use_acl: true, use_mtl: false }),
        ("mtl", Ablation { use_acl: false, use_mtl: true }),
        ("acl+mtl", Ablation { use_acl: true, use_mtl: true }),
    ];
}
