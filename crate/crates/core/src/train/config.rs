use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::ingest::PreprocessSpec;
use crate::losses::LossConfig;
use crate::taxonomy::TaxonomyVariant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub taxonomy: TaxonomyVariant,
    pub loss: LossConfig,
    pub seed: u64,
    /// `last.ckpt` and `best.ckpt` are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    pub preprocess: PreprocessSpec,
    pub freeze_encoder: bool,
    /// Batch size for evaluation passes.
    pub eval_batch_size: usize,
    /// Evaluate held-out sets every this many epochs (0 disables).
    pub eval_every: usize,
    /// Keep every decoded sample in memory.
    pub cache_samples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-5,
            optimizer: OptimizerConfig::default(),
            taxonomy: TaxonomyVariant::FourClass,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            preprocess: PreprocessSpec::default(),
            freeze_encoder: false,
            eval_batch_size: 8,
            eval_every: 1,
            cache_samples: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.momentum) {
            return bad("optimizer eps must be positive, weight_decay non-negative, momentum in [0, 1)".into());
        }
        if !(self.loss.epsilon > 0.0) {
            return bad("loss epsilon must be positive".into());
        }
        self.preprocess.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// SHA-256 of the settings that influence the trained weights.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in ["checkpoint_dir", "eval_batch_size", "eval_every", "cache_samples"] {
                obj.remove(k);
            }
        }
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

/// JSON with object keys sorted recursively.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let sorted: std::collections::BTreeMap<_, _> = m.iter().map(|(k, v)| (k.clone(), sort(v))).collect();
                Value::Object(sorted.into_iter().collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("value serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (50, 16, 1e-5));
    }

    #[test]
    fn digest_ignores_output_location_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.checkpoint_dir = Some("/tmp/x".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = serde_json::json!({"b": {"z": 1, "a": 2}, "a": [ {"y": 0, "x": 1} ]});
        assert_eq!(canonical_json(&v), r#"{"a":[{"x":1,"y":0}],"b":{"a":2,"z":1}}"#);
    }
}
