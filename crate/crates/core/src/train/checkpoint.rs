use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, TrainConfig};
use super::optimizer::Optimizer;
use super::TrainError;
use crate::nn::weights::{decode_container, encode_container, load_named, TensorMap};
use crate::nn::{build_model_with_seed, BackboneSpec, Module, PretrainSource, SegModel};
use crate::rng::GENERATOR_NAME;
use crate::scalar::Scalar;
use crate::taxonomy::make_taxonomy;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MXSGCKPT";
const FORMAT: u32 = 1;

/// Headline numbers of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub miou: f64,
    pub class_recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the optimization steps of the epoch.
    pub train_loss: f64,
    /// Pooled accuracy of the predictions made during the epoch.
    pub train_accuracy: f64,
    pub batches: usize,
    /// Batches whose pixels were all ignored.
    pub skipped_batches: usize,
    pub eval: BTreeMap<String, EvalSummary>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub generator: String,
    pub dtype: String,
    pub config_digest: String,
    pub config: TrainConfig,
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_accuracy: Option<f64>,
    pub parameter_manifest: Vec<(String, Vec<usize>)>,
    pub optimizer: OptimizerConfig,
    pub optimizer_step: u64,
}

/// Model parameters, optimizer state and training history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: TensorMap,
}

const MODEL: &str = "model.";
const FIRST: &str = "optim.first.";
const SECOND: &str = "optim.second.";

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().expect("scalar widens to f64")).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        config: &TrainConfig,
        backbone: &BackboneSpec,
        model: &SegModel<T>,
        optimizer: &Optimizer<T>,
        epoch: usize,
        history: &[EpochRecord],
        best_accuracy: Option<f64>,
    ) -> Self {
        let mut tensors = TensorMap::new();
        model.visit("", &mut |n, p| {
            tensors.insert(format!("{MODEL}{n}"), (p.value.shape().to_vec(), widen(p.value.data())));
        });
        for (prefix, map) in [(FIRST, &optimizer.first), (SECOND, &optimizer.second)] {
            for (n, v) in map {
                tensors.insert(format!("{prefix}{n}"), (vec![v.len()], widen(v)));
            }
        }
        Self {
            header: CheckpointHeader {
                format: FORMAT,
                generator: GENERATOR_NAME.to_string(),
                dtype: T::DTYPE.to_string(),
                config_digest: config.digest(),
                config: config.clone(),
                backbone: backbone.clone(),
                num_classes: model.num_classes(),
                seed: config.seed,
                epoch,
                history: history.to_vec(),
                best_accuracy,
                parameter_manifest: model.parameter_manifest(),
                optimizer: optimizer.config.clone(),
                optimizer_step: optimizer.step,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.header).expect("header serializes");
        let entries: Vec<(String, &[usize], &[f64])> =
            self.tensors.iter().map(|(n, (s, d))| (n.clone(), s.as_slice(), d.as_slice())).collect();
        if self.header.dtype == "f32" {
            let narrowed: Vec<Vec<f32>> = entries.iter().map(|(_, _, d)| d.iter().map(|&v| v as f32).collect()).collect();
            let refs: Vec<(String, &[usize], &[f32])> =
                entries.iter().zip(&narrowed).map(|((n, s, _), d)| (n.clone(), *s, d.as_slice())).collect();
            encode_container(CHECKPOINT_MAGIC, meta, &refs)
        } else {
            encode_container(CHECKPOINT_MAGIC, meta, &entries)
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (meta, _, tensors) = decode_container(CHECKPOINT_MAGIC, bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let header: CheckpointHeader = serde_json::from_value(meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if header.format != FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint format {}", header.format)));
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and copies the stored parameters into it.
    pub fn restore_model<T: Scalar>(&self) -> Result<SegModel<T>, TrainError> {
        let h = &self.header;
        let spec = BackboneSpec {
            family: h.backbone.family,
            pretrain_source: PretrainSource::Random,
            weights_path: None,
        };
        let taxonomy = make_taxonomy(h.config.taxonomy);
        let mut model = build_model_with_seed::<T>(&spec, &taxonomy, h.seed)?;
        if model.num_classes() != h.num_classes {
            model.rebuild_head(h.num_classes, h.seed);
        }
        let params: TensorMap = self
            .tensors
            .iter()
            .filter_map(|(n, v)| n.strip_prefix(MODEL).map(|k| (k.to_string(), v.clone())))
            .collect();
        load_named(&mut model, &params)?;
        model.freeze_encoder = h.config.freeze_encoder;
        Ok(model)
    }

    pub fn restore_optimizer<T: Scalar>(&self) -> Optimizer<T> {
        let mut opt = Optimizer::new(self.header.optimizer.clone(), self.header.config.learning_rate);
        opt.step = self.header.optimizer_step;
        for (n, (_, v)) in &self.tensors {
            let narrow = || v.iter().map(|&x| T::lit(x)).collect();
            if let Some(k) = n.strip_prefix(FIRST) {
                opt.first.insert(k.to_string(), narrow());
            } else if let Some(k) = n.strip_prefix(SECOND) {
                opt.second.insert(k.to_string(), narrow());
            }
        }
        opt
    }
}
