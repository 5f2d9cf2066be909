//! Pixel-wise cross-entropy and its class-reweighted variants.
//!
//! All four objectives share one reduction: with `N` the number of labeled
//! (non-ignored) pixels and `l_n = -log softmax(z_n)[y_n]`,
//!
//! ```text
//! L = (1/N) * sum_n w[y_n] * l_n
//! dL/dz_n = (w[y_n] / N) * (softmax(z_n) - onehot(y_n))
//! ```
//!
//! and they differ only in the per-class weight `w`:
//!
//! | kind                     | `w[c]`                              |
//! |--------------------------|-------------------------------------|
//! | cross-entropy            | `1`                                 |
//! | inverse frequency        | `v[c]`                              |
//! | recall                   | `1 - R[c]`                          |
//! | inverse frequency+recall | `v[c] * (1 - R[c])`                 |
//!
//! where `v[c] ∝ N / N[c]` is rescaled so the weights of classes present in
//! the batch sum to the number of present classes, and `R[c] = TP / (TP +
//! FN)` is the class recall of the batch's argmax prediction. Recall weights
//! are constants: no gradient flows through them. Classes absent from the
//! batch get frequency weight 0 (they have no pixels) and recall weight 1.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("ALL_PIXELS_IGNORED: the batch has no labeled pixels")]
    AllPixelsIgnored,
    #[error("target has {actual} pixels but logits cover {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("logits must be [batch, classes, height, width], got {0:?}")]
    BadLogitShape(Vec<usize>),
    #[error("label {label} is not a class index for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("{what} has {actual} classes, logits have {expected}")]
    ClassCountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("corpus frequency scope requires corpus class counts")]
    MissingCorpusCounts,
    #[error("unknown loss option `{0}`")]
    UnknownOption(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    InvFreq,
    Recall,
    InvFreqPlusRecall,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ce, LossKind::InvFreq, LossKind::Recall, LossKind::InvFreqPlusRecall];

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Ce => "Cross Entropy",
            LossKind::InvFreq => "Inverse Frequency",
            LossKind::Recall => "Recall CE",
            LossKind::InvFreqPlusRecall => "Inverse Frequency + Recall CE",
        }
    }

    pub fn uses_frequency(self) -> bool {
        matches!(self, LossKind::InvFreq | LossKind::InvFreqPlusRecall)
    }

    pub fn uses_recall(self) -> bool {
        matches!(self, LossKind::Recall | LossKind::InvFreqPlusRecall)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::InvFreq => "inv_freq",
            LossKind::Recall => "recall",
            LossKind::InvFreqPlusRecall => "inv_freq_plus_recall",
        })
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ce" | "cross_entropy" => Ok(LossKind::Ce),
            "inv_freq" | "inverse_frequency" => Ok(LossKind::InvFreq),
            "recall" | "recall_ce" => Ok(LossKind::Recall),
            "inv_freq_plus_recall" | "combined" => Ok(LossKind::InvFreqPlusRecall),
            other => Err(LossError::UnknownOption(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// Present-class weights sum to the number of present classes.
    #[default]
    SumToC,
}

/// Where class frequencies for inverse-frequency weighting come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyScope {
    #[default]
    Batch,
    /// Pixel counts of the whole training manifest.
    Corpus,
}

/// Where class recalls for recall weighting come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallScope {
    #[default]
    Batch,
    /// TP/FN accumulated over the epoch so far, current batch included.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub normalization: WeightNormalization,
    pub frequency_scope: FrequencyScope,
    pub recall_scope: RecallScope,
    /// Floor for class frequencies.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            normalization: WeightNormalization::SumToC,
            frequency_scope: FrequencyScope::Batch,
            recall_scope: RecallScope::Batch,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }
}

/// Per-pixel class scores, `[batch, classes, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitField<T>(Tensor<T>);

impl<T: Scalar> LogitField<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self, LossError> {
        if tensor.shape().len() != 4 {
            return Err(LossError::BadLogitShape(tensor.shape().to_vec()));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    /// `B * H * W`
    pub fn num_pixels(&self) -> usize {
        let (b, _, h, w) = self.0.dims4();
        b * h * w
    }

    /// Argmax class per pixel, in `(b, y, x)` order. Ties go to the lower index.
    pub fn argmax(&self) -> Vec<u8> {
        let (b, c, h, w) = self.0.dims4();
        let plane = h * w;
        let data = self.0.data();
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let mut best = 0;
                let mut best_v = data[base + p];
                for ci in 1..c {
                    let v = data[base + ci * plane + p];
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}

/// Per-class pixel, true-positive and false-negative counts of one batch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchClassStats {
    pub pixel_counts: Vec<u64>,
    pub true_positives: Vec<u64>,
    pub false_negatives: Vec<u64>,
}

impl BatchClassStats {
    pub fn zeros(classes: usize) -> Self {
        Self {
            pixel_counts: vec![0; classes],
            true_positives: vec![0; classes],
            false_negatives: vec![0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pixel_counts.len()
    }

    pub fn from_predictions(pred: &[u8], target: &[u8], ignore: u8, classes: usize) -> Result<Self, LossError> {
        if pred.len() != target.len() {
            return Err(LossError::ShapeMismatch {
                expected: pred.len(),
                actual: target.len(),
            });
        }
        let mut s = Self::zeros(classes);
        for (&p, &t) in pred.iter().zip(target) {
            if t == ignore {
                continue;
            }
            let ti = t as usize;
            if ti >= classes {
                return Err(LossError::LabelOutOfRange { label: t, classes });
            }
            s.pixel_counts[ti] += 1;
            if p == t {
                s.true_positives[ti] += 1;
            } else {
                s.false_negatives[ti] += 1;
            }
        }
        Ok(s)
    }

    /// Statistics of the argmax prediction against the target.
    pub fn from_logits<T: Scalar>(logits: &LogitField<T>, target: &[u8], ignore: u8) -> Result<Self, LossError> {
        Self::from_predictions(&logits.argmax(), target, ignore, logits.num_classes())
    }

    /// `TP / (TP + FN)`, `None` when the class has no labeled pixels.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let support = self.true_positives[class] + self.false_negatives[class];
        (support > 0).then(|| self.true_positives[class] as f64 / support as f64)
    }

    pub fn merge(&mut self, other: &BatchClassStats) {
        assert_eq!(self.num_classes(), other.num_classes(), "class count mismatch");
        for c in 0..self.num_classes() {
            self.pixel_counts[c] += other.pixel_counts[c];
            self.true_positives[c] += other.true_positives[c];
            self.false_negatives[c] += other.false_negatives[c];
        }
    }
}

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Tensor<T>,
    /// Per-class weights that were applied.
    pub class_weights: Vec<f64>,
}

/// Normalized inverse-frequency weights. Absent classes get 0.
pub fn inverse_frequency_weights(counts: &[u64], epsilon: f64, _norm: WeightNormalization) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                let freq = n as f64 / total as f64;
                1.0 / freq.max(epsilon)
            }
        })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w * present / sum).collect()
}

/// `1 - R[c]`, or 1 for classes without labeled pixels.
pub fn recall_weights(stats: &BatchClassStats) -> Vec<f64> {
    (0..stats.num_classes())
        .map(|c| stats.recall(c).map_or(1.0, |r| 1.0 - r))
        .collect()
}

fn class_counts(target: &[u8], ignore: u8, classes: usize) -> Result<Vec<u64>, LossError> {
    let mut counts = vec![0u64; classes];
    for &t in target {
        if t == ignore {
            continue;
        }
        if t as usize >= classes {
            return Err(LossError::LabelOutOfRange { label: t, classes });
        }
        counts[t as usize] += 1;
    }
    Ok(counts)
}

/// `(1/N) * sum_n w[y_n] * (-log softmax(z_n)[y_n])` with its gradient.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &LogitField<T>,
    target: &[u8],
    ignore: u8,
    class_weights: &[f64],
) -> Result<LossOutput<T>, LossError> {
    let (b, c, h, w) = logits.tensor().dims4();
    let plane = h * w;
    if target.len() != b * plane {
        return Err(LossError::ShapeMismatch {
            expected: b * plane,
            actual: target.len(),
        });
    }
    if class_weights.len() != c {
        return Err(LossError::ClassCountMismatch {
            what: "class weights",
            expected: c,
            actual: class_weights.len(),
        });
    }
    let mut labeled = 0usize;
    for &t in target {
        if t == ignore {
            continue;
        }
        if t as usize >= c {
            return Err(LossError::LabelOutOfRange { label: t, classes: c });
        }
        labeled += 1;
    }
    if labeled == 0 {
        return Err(LossError::AllPixelsIgnored);
    }

    let data = logits.tensor().data();
    let inv_n = T::one() / T::from_usize(labeled).expect("pixel count fits scalar");
    let weights: Vec<T> = class_weights.iter().map(|&v| T::lit(v)).collect();
    let mut grad = Tensor::zeros(logits.tensor().shape());
    let g = grad.data_mut();
    let mut total = 0.0f64;
    let mut probs = vec![T::zero(); c];

    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let t = target[bi * plane + p];
            if t == ignore {
                continue;
            }
            let y = t as usize;
            let mut m = data[base + p];
            for ci in 1..c {
                m = m.max(data[base + ci * plane + p]);
            }
            let mut z = T::zero();
            for (ci, pr) in probs.iter_mut().enumerate() {
                *pr = (data[base + ci * plane + p] - m).exp();
                z += *pr;
            }
            let log_z = z.ln() + m;
            let nll = log_z - data[base + y * plane + p];
            let wy = weights[y];
            total += (wy * nll).to_f64().unwrap_or(f64::NAN);
            let scale = wy * inv_n;
            if scale != T::zero() {
                for (ci, pr) in probs.iter().enumerate() {
                    let onehot = if ci == y { T::one() } else { T::zero() };
                    g[base + ci * plane + p] = scale * (*pr / z - onehot);
                }
            }
        }
    }
    Ok(LossOutput {
        value: T::lit(total / labeled as f64),
        grad,
        class_weights: class_weights.to_vec(),
    })
}

/// Mean negative log-likelihood of the true class over labeled pixels.
pub fn cross_entropy<T: Scalar>(logits: &LogitField<T>, target: &[u8], ignore: u8) -> Result<LossOutput<T>, LossError> {
    weighted_cross_entropy(logits, target, ignore, &vec![1.0; logits.num_classes()])
}

/// Cross-entropy reweighted by normalized inverse class frequency of the batch.
pub fn inverse_frequency_ce<T: Scalar>(
    logits: &LogitField<T>,
    target: &[u8],
    ignore: u8,
    config: &LossConfig,
) -> Result<LossOutput<T>, LossError> {
    let counts = class_counts(target, ignore, logits.num_classes())?;
    let w = inverse_frequency_weights(&counts, config.epsilon, config.normalization);
    weighted_cross_entropy(logits, target, ignore, &w)
}

/// Cross-entropy reweighted by each class's false-negative rate `1 - R`.
pub fn recall_ce<T: Scalar>(
    logits: &LogitField<T>,
    target: &[u8],
    ignore: u8,
    _config: &LossConfig,
    stats: &BatchClassStats,
) -> Result<LossOutput<T>, LossError> {
    check_stats(logits, stats)?;
    weighted_cross_entropy(logits, target, ignore, &recall_weights(stats))
}

/// Product of the inverse-frequency and recall weights.
pub fn combined_loss<T: Scalar>(
    logits: &LogitField<T>,
    target: &[u8],
    ignore: u8,
    config: &LossConfig,
    stats: &BatchClassStats,
) -> Result<LossOutput<T>, LossError> {
    check_stats(logits, stats)?;
    let counts = class_counts(target, ignore, logits.num_classes())?;
    let freq = inverse_frequency_weights(&counts, config.epsilon, config.normalization);
    let w: Vec<f64> = freq.iter().zip(recall_weights(stats)).map(|(f, r)| f * r).collect();
    weighted_cross_entropy(logits, target, ignore, &w)
}

fn check_stats<T: Scalar>(logits: &LogitField<T>, stats: &BatchClassStats) -> Result<(), LossError> {
    if stats.num_classes() != logits.num_classes() {
        return Err(LossError::ClassCountMismatch {
            what: "batch statistics",
            expected: logits.num_classes(),
            actual: stats.num_classes(),
        });
    }
    Ok(())
}

/// Statistics that outlive a single batch.
#[derive(Clone, Debug, Default)]
pub struct LossContext {
    /// Labeled pixel counts per class over the training corpus.
    pub corpus_counts: Option<Vec<u64>>,
    /// Running TP/FN totals, updated by [`compute_loss`] in running mode.
    pub running: Option<BatchClassStats>,
}

impl LossContext {
    /// Clears running recall statistics, e.g. at an epoch boundary.
    pub fn reset_running(&mut self) {
        self.running = None;
    }
}

/// Applies the configured objective, honouring frequency and recall scopes.
///
/// Returns the loss together with the batch statistics of the current
/// prediction.
pub fn compute_loss<T: Scalar>(
    config: &LossConfig,
    logits: &LogitField<T>,
    target: &[u8],
    ignore: u8,
    ctx: &mut LossContext,
) -> Result<(LossOutput<T>, BatchClassStats), LossError> {
    let classes = logits.num_classes();
    let batch_stats = BatchClassStats::from_logits(logits, target, ignore)?;
    let freq = if config.kind.uses_frequency() {
        let counts = match config.frequency_scope {
            FrequencyScope::Batch => batch_stats.pixel_counts.clone(),
            FrequencyScope::Corpus => {
                let c = ctx.corpus_counts.clone().ok_or(LossError::MissingCorpusCounts)?;
                if c.len() != classes {
                    return Err(LossError::ClassCountMismatch {
                        what: "corpus counts",
                        expected: classes,
                        actual: c.len(),
                    });
                }
                c
            }
        };
        inverse_frequency_weights(&counts, config.epsilon, config.normalization)
    } else {
        vec![1.0; classes]
    };
    let recall = if config.kind.uses_recall() {
        let stats = match config.recall_scope {
            RecallScope::Batch => batch_stats.clone(),
            RecallScope::Running => {
                let running = ctx.running.get_or_insert_with(|| BatchClassStats::zeros(classes));
                running.merge(&batch_stats);
                running.clone()
            }
        };
        recall_weights(&stats)
    } else {
        vec![1.0; classes]
    };
    let weights: Vec<f64> = freq.iter().zip(&recall).map(|(a, b)| a * b).collect();
    let out = weighted_cross_entropy(logits, target, ignore, &weights)?;
    Ok((out, batch_stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IGN: u8 = 255;

    fn field(b: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> LogitField<f64> {
        LogitField::new(Tensor::from_vec(&[b, c, h, w], (0..b * c * h * w).map(f).collect())).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = field(1, 4, 2, 2, |_| 0.3);
        let out = cross_entropy(&l, &[0, 1, 2, 3], IGN).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
        assert!((out.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        // class index equals pixel index, margin 200
        let l = field(1, 3, 1, 3, |i| if i / 3 == i % 3 { 200.0 } else { 0.0 });
        let out = cross_entropy(&l, &[0, 1, 2], IGN).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let l = field(1, 3, 1, 2, |i| i as f64);
        assert_eq!(cross_entropy(&l, &[IGN, IGN], IGN).unwrap_err(), LossError::AllPixelsIgnored);
    }

    #[test]
    fn bad_label_and_shape_rejected() {
        let l = field(1, 3, 1, 2, |i| i as f64);
        assert!(matches!(cross_entropy(&l, &[0, 3], IGN), Err(LossError::LabelOutOfRange { .. })));
        assert!(matches!(cross_entropy(&l, &[0], IGN), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn inverse_frequency_weights_normalize_over_present_classes() {
        let w = inverse_frequency_weights(&[90, 10, 0], 1e-8, WeightNormalization::SumToC);
        assert_eq!(w[2], 0.0);
        assert!((w[1] / w[0] - 9.0).abs() < 1e-12);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
        let single = inverse_frequency_weights(&[0, 7, 0], 1e-8, WeightNormalization::SumToC);
        assert_eq!(single, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn recall_weights_default_to_one_for_absent() {
        let s = BatchClassStats {
            pixel_counts: vec![4, 0],
            true_positives: vec![1, 0],
            false_negatives: vec![3, 0],
        };
        assert_eq!(recall_weights(&s), vec![0.75, 1.0]);
    }

    #[test]
    fn running_recall_accumulates() {
        let cfg = LossConfig {
            kind: LossKind::Recall,
            recall_scope: RecallScope::Running,
            ..Default::default()
        };
        // two classes, predictions favour class 0 everywhere
        let l = field(1, 2, 1, 2, |i| if i < 2 { 1.0 } else { 0.0 });
        let mut ctx = LossContext::default();
        compute_loss(&cfg, &l, &[0, 1], IGN, &mut ctx).unwrap();
        compute_loss(&cfg, &l, &[0, 0], IGN, &mut ctx).unwrap();
        let running = ctx.running.clone().unwrap();
        assert_eq!(running.true_positives, vec![3, 0]);
        assert_eq!(running.false_negatives, vec![0, 1]);
        ctx.reset_running();
        assert!(ctx.running.is_none());
    }

    #[test]
    fn corpus_scope_needs_counts() {
        let cfg = LossConfig {
            kind: LossKind::InvFreq,
            frequency_scope: FrequencyScope::Corpus,
            ..Default::default()
        };
        let l = field(1, 2, 1, 2, |i| i as f64);
        let mut ctx = LossContext::default();
        assert_eq!(
            compute_loss(&cfg, &l, &[0, 1], IGN, &mut ctx).unwrap_err(),
            LossError::MissingCorpusCounts
        );
        ctx.corpus_counts = Some(vec![3, 1]);
        let (out, _) = compute_loss(&cfg, &l, &[0, 1], IGN, &mut ctx).unwrap();
        assert!((out.class_weights[1] / out.class_weights[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kind_parsing() {
        for k in LossKind::ALL {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }
}
