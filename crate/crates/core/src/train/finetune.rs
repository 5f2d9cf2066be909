use std::time::Instant;

use super::checkpoint::{Checkpoint, EpochRecord, EvalSummary};
use super::config::TrainConfig;
use super::data::{epoch_order, Dataset};
use super::optimizer::Optimizer;
use super::TrainError;
use crate::losses::{compute_loss, LogitField, LossContext, LossError, FrequencyScope};
use crate::metrics::{derive_metrics, ConfusionMatrix, EvalReport};
use crate::nn::{BackboneSpec, Mode, Module, SegModel};
use crate::scalar::Scalar;
use crate::taxonomy::Split;

const ENCODER_PREFIX: &str = "encoder.";

/// A trained model and the checkpoints taken along the way.
pub struct TrainOutcome<T: Scalar> {
    pub model: SegModel<T>,
    pub history: Vec<EpochRecord>,
    pub last: Checkpoint,
    /// Highest accuracy on the first held-out set, when one is given.
    pub best: Option<Checkpoint>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.train_loss)
    }
}

struct State<T: Scalar> {
    model: SegModel<T>,
    optimizer: Optimizer<T>,
    history: Vec<EpochRecord>,
    best_accuracy: Option<f64>,
    best: Option<Checkpoint>,
}

/// Trains `model` on `train` for `config.epochs` epochs.
pub fn finetune<T: Scalar>(
    mut model: SegModel<T>,
    backbone: &BackboneSpec,
    train: &Dataset<T>,
    eval_sets: &[(&str, &Dataset<T>)],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    model.freeze_encoder = config.freeze_encoder;
    let state = State {
        model,
        optimizer: Optimizer::new(config.optimizer.clone(), config.learning_rate),
        history: Vec::new(),
        best_accuracy: None,
        best: None,
    };
    run(state, backbone, train, eval_sets, config)
}

/// Continues a run from `checkpoint` up to `config.epochs`. The config must
/// match the one the checkpoint was written with, apart from the epoch count
/// and output settings.
pub fn resume<T: Scalar>(
    checkpoint: &Checkpoint,
    train: &Dataset<T>,
    eval_sets: &[(&str, &Dataset<T>)],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    let h = &checkpoint.header;
    let mut stored = h.config.clone();
    stored.epochs = config.epochs;
    if stored.digest() != config.digest() {
        return Err(TrainError::Config("resume config differs from the checkpoint's".into()));
    }
    if h.dtype != T::DTYPE {
        return Err(TrainError::Config(format!("checkpoint holds {} values, run uses {}", h.dtype, T::DTYPE)));
    }
    let state = State {
        model: checkpoint.restore_model()?,
        optimizer: checkpoint.restore_optimizer(),
        history: h.history.clone(),
        best_accuracy: h.best_accuracy,
        best: None,
    };
    run(state, &h.backbone, train, eval_sets, config)
}

fn run<T: Scalar>(
    mut st: State<T>,
    backbone: &BackboneSpec,
    train: &Dataset<T>,
    eval_sets: &[(&str, &Dataset<T>)],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyManifest(train.id().to_string()));
    }
    let classes = st.model.num_classes();
    if train.taxonomy().num_classes() != classes {
        return Err(TrainError::Config(format!(
            "model predicts {classes} classes but the data uses {}",
            train.taxonomy().num_classes()
        )));
    }
    let ignore = train.taxonomy().ignore_value();
    let mut ctx = LossContext::default();
    if config.loss.kind.uses_frequency() && config.loss.frequency_scope == FrequencyScope::Corpus {
        ctx.corpus_counts = Some(train.class_counts()?);
    }
    let skip: &[&str] = if config.freeze_encoder { &[ENCODER_PREFIX] } else { &[] };
    let start = st.history.len();
    let ckpt_dir = config.checkpoint_dir.clone();

    for epoch in start..config.epochs {
        let t0 = Instant::now();
        ctx.reset_running();
        let order = epoch_order(config.seed, train.content_hash(), epoch, train.len());
        let (mut loss_sum, mut steps, mut skipped) = (0.0f64, 0usize, 0usize);
        let (mut correct, mut labeled) = (0u64, 0u64);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train.batch(chunk)?;
            st.model.zero_grad();
            let logits = LogitField::new(st.model.forward(&batch.images, Mode::Train))?;
            let (out, stats) = match compute_loss(&config.loss, &logits, &batch.targets, ignore, &mut ctx) {
                Err(LossError::AllPixelsIgnored) => {
                    skipped += 1;
                    continue;
                }
                other => other?,
            };
            let value = out.value.to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() || !out.grad.all_finite() {
                return Err(TrainError::Diverged { epoch: epoch + 1, batch: bi });
            }
            st.model.backward(&out.grad);
            st.optimizer.apply(&mut st.model, skip);
            loss_sum += value;
            steps += 1;
            correct += stats.true_positives.iter().sum::<u64>();
            labeled += stats.pixel_counts.iter().sum::<u64>();
        }
        let mut record = EpochRecord {
            epoch: epoch + 1,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            train_accuracy: if labeled > 0 { correct as f64 / labeled as f64 } else { f64::NAN },
            batches: steps,
            skipped_batches: skipped,
            eval: Default::default(),
            seconds: 0.0,
        };
        let eval_now = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        if eval_now {
            for (name, ds) in eval_sets {
                let report = score(&mut st.model, ds, config.eval_batch_size)?;
                record.eval.insert(name.to_string(), summarize(&report));
            }
        }
        record.seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "epoch {}/{}: loss {:.5} train acc {:.4} ({:.1}s)",
            record.epoch,
            config.epochs,
            record.train_loss,
            record.train_accuracy,
            record.seconds
        );
        let headline = eval_sets.first().and_then(|(n, _)| record.eval.get(*n)).map(|s| s.accuracy);
        st.history.push(record);
        if let Some(acc) = headline {
            if st.best_accuracy.is_none_or(|b| acc > b) {
                st.best_accuracy = Some(acc);
                let ck = Checkpoint::capture(config, backbone, &st.model, &st.optimizer, epoch + 1, &st.history, st.best_accuracy);
                if let Some(dir) = &ckpt_dir {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                st.best = Some(ck);
            }
        }
        if let Some(dir) = &ckpt_dir {
            Checkpoint::capture(config, backbone, &st.model, &st.optimizer, epoch + 1, &st.history, st.best_accuracy)
                .save(&dir.join("last.ckpt"))?;
        }
    }

    let last = Checkpoint::capture(
        config,
        backbone,
        &st.model,
        &st.optimizer,
        st.history.len(),
        &st.history,
        st.best_accuracy,
    );
    if let Some(dir) = &ckpt_dir {
        last.save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        model: st.model,
        history: st.history,
        last,
        best: st.best,
    })
}

pub fn summarize(report: &EvalReport) -> EvalSummary {
    EvalSummary {
        accuracy: report.accuracy,
        f1_macro: report.f1_macro,
        miou: report.miou,
        class_recall: report.per_class.iter().map(|c| c.recall).collect(),
    }
}

/// Confusion matrix of the model's predictions over `data`, with no
/// restriction on splits.
pub fn confusion<T: Scalar>(model: &mut SegModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<ConfusionMatrix, TrainError> {
    let classes = model.num_classes();
    let ignore = data.taxonomy().ignore_value();
    let mut cm = ConfusionMatrix::new(classes);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let logits = LogitField::new(model.forward(&batch.images, Mode::Eval))?;
        cm.accumulate_slices(&logits.argmax(), &batch.targets, ignore)?;
    }
    Ok(cm)
}

/// Metrics over any dataset; used for training-set accuracy.
pub fn score<T: Scalar>(model: &mut SegModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<EvalReport, TrainError> {
    Ok(derive_metrics(&confusion(model, data, batch_size)?)?)
}

/// Held-out evaluation. Refuses datasets containing training samples.
pub fn evaluate<T: Scalar>(model: &mut SegModel<T>, test: &Dataset<T>, batch_size: usize) -> Result<EvalReport, TrainError> {
    let train_entries: Vec<usize> = test
        .splits()
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if let Some(&first) = train_entries.first() {
        return Err(TrainError::SplitViolation {
            count: train_entries.len(),
            first,
        });
    }
    score(model, test, batch_size)
}
