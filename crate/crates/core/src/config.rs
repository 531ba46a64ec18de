//! Run configuration. Serialized field-for-field as the JSON run config file;
//! unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Weights and temperatures of the set-quality objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetObjectiveConfig {
    pub lambda_rel: f64,
    pub lambda_cov: f64,
    pub lambda_red: f64,
    /// Coverage (log-sum-exp) temperature.
    pub tau_c: f64,
    /// Temporal kernel bandwidth, in timestamp units.
    pub gamma: f64,
}

impl Default for SetObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_rel: 0.5,
            lambda_cov: 0.3,
            lambda_red: 0.2,
            tau_c: 2.0,
            gamma: 10.0,
        }
    }
}

impl SetObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rel", self.lambda_rel),
            ("lambda_cov", self.lambda_cov),
            ("lambda_red", self.lambda_red),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        positive("tau_c", self.tau_c)?;
        positive("gamma", self.gamma)
    }
}

/// Gumbel temperature schedule: `max(min, init * decay^step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub init: f64,
    pub decay: f64,
    pub min: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            init: 2.0,
            decay: 0.999,
            min: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,

    pub lambda_set: f64,
    pub lambda_sep: f64,
    /// λ_KL at step 0; ramps linearly to `lambda_kl_end` over the first epoch.
    pub lambda_kl_start: f64,
    pub lambda_kl_end: f64,
    pub temperature: TemperatureSchedule,
    pub tau_d: f64,
    pub set_objective: SetObjectiveConfig,

    /// Number of task queries K.
    pub num_queries: usize,
    pub k_sel: usize,
    pub n_frames: usize,

    pub dim: usize,
    pub scorer_hidden: usize,
    pub teacher_hidden: usize,
    pub teacher_mlp_hidden: usize,
    pub encoder_layers: usize,
    pub encoder_mlp_hidden: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    /// Gain of the teacher's initial identity read-out (pooled features -> option space).
    pub teacher_readout_gain: f64,

    pub disable_cot_query: bool,
    pub disable_set_objective: bool,
    pub disable_kl: bool,
    pub disable_sep: bool,

    pub metrics_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 3,
            seed: 0,
            lambda_set: 1e-4,
            lambda_sep: 0.01,
            lambda_kl_start: 0.1,
            lambda_kl_end: 1.0,
            temperature: TemperatureSchedule::default(),
            tau_d: 0.5,
            set_objective: SetObjectiveConfig::default(),
            num_queries: 3,
            k_sel: 16,
            n_frames: 128,
            dim: 64,
            scorer_hidden: 128,
            teacher_hidden: 64,
            teacher_mlp_hidden: 64,
            encoder_layers: 2,
            encoder_mlp_hidden: 64,
            vocab_size: 64,
            prompt_len: 32,
            teacher_readout_gain: 1.0,
            disable_cot_query: false,
            disable_set_objective: false,
            disable_kl: false,
            disable_sep: false,
            metrics_every: 50,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be >= 0, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be >= {min}, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        nonneg("weight_decay", self.weight_decay)?;
        for (n, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{n} must be in [0, 1), got {v}")));
            }
        }
        positive("adam_eps", self.adam_eps)?;
        at_least("batch_size", self.batch_size, 1)?;
        nonneg("lambda_set", self.lambda_set)?;
        nonneg("lambda_sep", self.lambda_sep)?;
        nonneg("lambda_kl_start", self.lambda_kl_start)?;
        nonneg("lambda_kl_end", self.lambda_kl_end)?;
        positive("temperature.init", self.temperature.init)?;
        positive("temperature.min", self.temperature.min)?;
        if !(self.temperature.decay > 0.0 && self.temperature.decay <= 1.0) {
            return Err(Error::invalid(format!(
                "temperature.decay must be in (0, 1], got {}",
                self.temperature.decay
            )));
        }
        positive("tau_d", self.tau_d)?;
        self.set_objective.validate()?;
        if !self.disable_cot_query {
            at_least("num_queries", self.num_queries, 1)?;
        }
        at_least("k_sel", self.k_sel, 1)?;
        if self.k_sel > self.n_frames {
            return Err(Error::invalid(format!(
                "k_sel ({}) exceeds n_frames ({})",
                self.k_sel, self.n_frames
            )));
        }
        at_least("dim", self.dim, 1)?;
        at_least("scorer_hidden", self.scorer_hidden, 1)?;
        at_least("teacher_hidden", self.teacher_hidden, 1)?;
        at_least("teacher_mlp_hidden", self.teacher_mlp_hidden, 1)?;
        at_least("encoder_layers", self.encoder_layers, 1)?;
        at_least("encoder_mlp_hidden", self.encoder_mlp_hidden, 1)?;
        at_least("vocab_size", self.vocab_size, 1)?;
        at_least("prompt_len", self.prompt_len, 0)?;
        nonneg("teacher_readout_gain", self.teacher_readout_gain)?;
        at_least("metrics_every", self.metrics_every as usize, 1)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest[..32]);
        out
    }

    /// Hash of the fields that determine parameter shapes.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let shape = serde_json::json!({
            "dim": self.dim,
            "scorer_hidden": self.scorer_hidden,
            "teacher_hidden": self.teacher_hidden,
            "teacher_mlp_hidden": self.teacher_mlp_hidden,
            "encoder_layers": self.encoder_layers,
            "encoder_mlp_hidden": self.encoder_mlp_hidden,
            "vocab_size": self.vocab_size,
            "prompt_len": self.prompt_len,
        });
        let digest = Sha256::digest(shape.to_string().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest[..32]);
        out
    }
}
