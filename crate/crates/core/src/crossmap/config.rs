use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;
use crate::numerics::AdamConfig;
use crate::textcodec::MAX_INSTR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers_per_stack: usize,
    pub heads: usize,
    pub ff_size: usize,
    pub dropout: f64,
    pub env_dropout: f64,
    pub max_instr: usize,
    /// Most moves a rollout may take before it is cut off.
    pub max_path: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Minimum speaker score for generated instructions; `inf` rejects all.
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub lambda_threshold: f64,
    pub batch_size: usize,
    /// Predict the masked action from both sides instead of only the past.
    pub path_mask_bidirectional: bool,
    /// Let speaker losses update the navigator through its latent actions.
    pub speaker_updates_cmt: bool,
    /// Share of instruction tokens replaced by MASK in bidirectional speaker
    /// training.
    pub mlm_rate: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 384,
            layers_per_stack: 2,
            heads: 12,
            ff_size: 1534,
            dropout: 0.1,
            env_dropout: 0.4,
            max_instr: MAX_INSTR,
            max_path: 12,
            lr: 5e-4,
            beta1: 0.99,
            beta2: 0.9,
            lambda_threshold: 20.0,
            batch_size: 50,
            path_mask_bidirectional: false,
            speaker_updates_cmt: true,
            mlm_rate: 0.15,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration for single-core experiments: same topology,
    /// smaller widths.
    pub fn toy() -> Self {
        Self {
            hidden: 32,
            heads: 4,
            ff_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.layers_per_stack == 0 || self.ff_size == 0 {
            return fail("layers_per_stack and ff_size must be positive".into());
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("env_dropout", self.env_dropout),
            ("mlm_rate", self.mlm_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("{name} {rate} is outside [0, 1)"));
            }
        }
        if self.max_instr != MAX_INSTR {
            return fail(format!("max_instr must be {MAX_INSTR}"));
        }
        if self.max_path == 0 || self.batch_size == 0 {
            return fail("max_path and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("optimizer settings out of range".into());
        }
        if self.lambda_threshold.is_nan() {
            return fail("lambda_threshold is NaN".into());
        }
        if !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "+inf") => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
    }
}

/// Widths of the per-view feature halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_sem: usize,
    pub d_vis: usize,
}

impl FeatureDims {
    pub fn width(&self) -> usize {
        self.d_sem + self.d_vis
    }
}
