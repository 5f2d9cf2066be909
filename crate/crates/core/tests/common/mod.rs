//! Independent scalar reference implementations used by the integration tests.

#![allow(dead_code)]

use mixseg::losses::LossKind;
use mixseg::metrics::ConfusionMatrix;
use mixseg::rng;
use rand_chacha::ChaCha8Rng;

pub const IGNORE: u8 = 255;

/// A random logit field in `[b, c, h, w]` layout with its targets.
#[derive(Clone, Debug)]
pub struct Instance {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub logits: Vec<f64>,
    pub target: Vec<u8>,
}

impl Instance {
    pub fn random(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize, ignore_rate: f64) -> Self {
        let logits = (0..b * c * h * w).map(|_| 2.0 * rng::normal(r)).collect();
        let mut target: Vec<u8> = (0..b * h * w)
            .map(|_| {
                if rng::unit_f64(r) < ignore_rate {
                    IGNORE
                } else {
                    rng::below(r, c as u64) as u8
                }
            })
            .collect();
        if target.iter().all(|&t| t == IGNORE) {
            target[0] = 0;
        }
        Self { b, c, h, w, logits, target }
    }

    pub fn pixels(&self) -> usize {
        self.b * self.h * self.w
    }

    /// Scores of pixel `n` (batch-major, then row-major).
    pub fn scores(&self, n: usize) -> Vec<f64> {
        let plane = self.h * self.w;
        let (bi, p) = (n / plane, n % plane);
        (0..self.c).map(|k| self.logits[(bi * self.c + k) * plane + p]).collect()
    }

    pub fn index(&self, n: usize, class: usize) -> usize {
        let plane = self.h * self.w;
        (n / plane * self.c + class) * plane + n % plane
    }

    pub fn tensor(&self) -> mixseg::TensorF64 {
        mixseg::Tensor::from_vec(&[self.b, self.c, self.h, self.w], self.logits.clone())
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..z.len() {
        if z[k] > z[best] {
            best = k;
        }
    }
    best
}

/// Class weights the oracle applies for `kind`, from plain pixel counting.
pub fn oracle_weights(inst: &Instance, kind: LossKind) -> Vec<f64> {
    let c = inst.c;
    let mut count = vec![0usize; c];
    let mut tp = vec![0usize; c];
    for n in 0..inst.pixels() {
        let t = inst.target[n];
        if t == IGNORE {
            continue;
        }
        count[t as usize] += 1;
        if argmax(&inst.scores(n)) == t as usize {
            tp[t as usize] += 1;
        }
    }
    let labeled: usize = count.iter().sum();

    let mut freq_w = vec![1.0; c];
    if matches!(kind, LossKind::InvFreq | LossKind::InvFreqPlusRecall) {
        let present: Vec<usize> = (0..c).filter(|&k| count[k] > 0).collect();
        let raw: Vec<f64> = (0..c)
            .map(|k| if count[k] == 0 { 0.0 } else { labeled as f64 / count[k] as f64 })
            .collect();
        let s: f64 = present.iter().map(|&k| raw[k]).sum();
        for k in 0..c {
            freq_w[k] = raw[k] * present.len() as f64 / s;
        }
    }
    let mut recall_w = vec![1.0; c];
    if matches!(kind, LossKind::Recall | LossKind::InvFreqPlusRecall) {
        for k in 0..c {
            if count[k] > 0 {
                recall_w[k] = 1.0 - tp[k] as f64 / count[k] as f64;
            }
        }
    }
    (0..c).map(|k| freq_w[k] * recall_w[k]).collect()
}

/// Mean weighted `-log softmax` of the true class over labeled pixels.
pub fn oracle_loss(inst: &Instance, kind: LossKind) -> f64 {
    let w = oracle_weights(inst, kind);
    let (mut sum, mut n_lab) = (0.0, 0usize);
    for n in 0..inst.pixels() {
        let t = inst.target[n];
        if t == IGNORE {
            continue;
        }
        let p = softmax(&inst.scores(n));
        sum += -w[t as usize] * p[t as usize].ln();
        n_lab += 1;
    }
    sum / n_lab as f64
}

/// The same value through per-class geometric-mean confidences:
/// `-(1/N) * sum_c w_c * N_c * log P_c`.
pub fn oracle_loss_by_class(inst: &Instance, kind: LossKind) -> f64 {
    let w = oracle_weights(inst, kind);
    let mut log_sum = vec![0.0; inst.c];
    let mut count = vec![0usize; inst.c];
    for n in 0..inst.pixels() {
        let t = inst.target[n];
        if t != IGNORE {
            log_sum[t as usize] += softmax(&inst.scores(n))[t as usize].ln();
            count[t as usize] += 1;
        }
    }
    let total: usize = count.iter().sum();
    let mut acc = 0.0;
    for k in 0..inst.c {
        if count[k] > 0 {
            let log_pc = log_sum[k] / count[k] as f64;
            acc -= w[k] * count[k] as f64 * log_pc;
        }
    }
    acc / total as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Per-class metrics by enumerating every cell of the matrix.
#[derive(Debug)]
pub struct OracleMetrics {
    pub accuracy: f64,
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub f1_macro: f64,
    pub miou: f64,
}

pub fn oracle_metrics(cm: &ConfusionMatrix) -> OracleMetrics {
    let c = cm.num_classes();
    let (mut tp, mut fp, mut fn_) = (vec![0u64; c], vec![0u64; c], vec![0u64; c]);
    let (mut correct, mut total) = (0u64, 0u64);
    for truth in 0..c {
        for pred in 0..c {
            let v = cm.get(truth, pred);
            total += v;
            if truth == pred {
                tp[truth] += v;
                correct += v;
            } else {
                fn_[truth] += v;
                fp[pred] += v;
            }
        }
    }
    let frac = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let recall: Vec<Option<f64>> = (0..c).map(|k| frac(tp[k], tp[k] + fn_[k])).collect();
    let precision: Vec<Option<f64>> = (0..c).map(|k| frac(tp[k], tp[k] + fp[k])).collect();
    let f1: Vec<Option<f64>> = (0..c)
        .map(|k| match (precision[k], recall[k]) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (_, Some(_)) | (Some(_), _) => Some(0.0),
            _ => None,
        })
        .collect();
    let iou: Vec<Option<f64>> = (0..c).map(|k| frac(tp[k], tp[k] + fp[k] + fn_[k])).collect();
    let supported: Vec<usize> = (0..c).filter(|&k| tp[k] + fn_[k] > 0).collect();
    let n = supported.len() as f64;
    OracleMetrics {
        accuracy: correct as f64 / total as f64,
        f1_macro: supported.iter().map(|&k| f1[k].unwrap()).sum::<f64>() / n,
        miou: supported.iter().map(|&k| iou[k].unwrap()).sum::<f64>() / n,
        recall,
        precision,
        f1,
        iou,
    }
}

/// A random matrix with occasional empty rows and columns.
pub fn random_confusion(r: &mut ChaCha8Rng) -> ConfusionMatrix {
    let c = 2 + rng::below(r, 6) as usize;
    let empty_row = rng::below(r, 4) == 0;
    let dead = rng::below(r, c as u64) as usize;
    let mut counts: Vec<u64> = (0..c * c)
        .map(|i| {
            let (truth, pred) = (i / c, i % c);
            if empty_row && (truth == dead || pred == dead) {
                0
            } else {
                rng::below(r, 1000)
            }
        })
        .collect();
    if counts.iter().all(|&v| v == 0) {
        counts[0] = 1;
    }
    ConfusionMatrix::from_counts(c, counts).unwrap()
}

/// Loss value and logit gradient from the library for `kind`, with recall
/// statistics taken from `stats_from` (the instance itself when `None`).
pub fn library_loss(
    inst: &Instance,
    kind: LossKind,
    stats_from: Option<&Instance>,
) -> mixseg::losses::LossOutput<f64> {
    use mixseg::losses::*;
    let logits = LogitField::new(inst.tensor()).unwrap();
    let stats_src = LogitField::new(stats_from.unwrap_or(inst).tensor()).unwrap();
    let stats = BatchClassStats::from_logits(&stats_src, &inst.target, IGNORE).unwrap();
    let cfg = LossConfig::new(kind);
    match kind {
        LossKind::Ce => cross_entropy(&logits, &inst.target, IGNORE),
        LossKind::InvFreq => inverse_frequency_ce(&logits, &inst.target, IGNORE, &cfg),
        LossKind::Recall => recall_ce(&logits, &inst.target, IGNORE, &cfg, &stats),
        LossKind::InvFreqPlusRecall => combined_loss(&logits, &inst.target, IGNORE, &cfg, &stats),
    }
    .unwrap()
}
