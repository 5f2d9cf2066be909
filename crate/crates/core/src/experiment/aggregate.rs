use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::Setting;
use super::run::{CellRecord, CellStatus};
use crate::metrics::EvalReport;
use crate::train::canonical_json;

/// Seed statistics of one metric for one setting and test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// The cell setting without its seed.
    pub setting: Setting,
    pub test_set: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Two-sided 95% Student-t interval, present when `n >= 2`.
    pub ci95: Option<(f64, f64)>,
    pub values: Vec<f64>,
    pub cells: Vec<String>,
}

impl Aggregate {
    pub fn half_width(&self) -> Option<f64> {
        self.ci95.map(|(lo, hi)| (hi - lo) / 2.0)
    }
}

/// Mean and 95% interval `mean ± t(0.975, n-1) * s / sqrt(n)`.
pub fn mean_ci(values: &[f64]) -> (f64, Option<(f64, f64)>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let h = t * var.sqrt() / (n as f64).sqrt();
    (mean, Some((mean - h, mean + h)))
}

/// `accuracy`, `f1_macro`, `miou`, then `recall/<class>` per class.
pub fn metric_names(classes: &[String]) -> Vec<String> {
    let mut names: Vec<String> = ["accuracy", "f1_macro", "miou"].iter().map(|s| s.to_string()).collect();
    names.extend(classes.iter().map(|c| format!("recall/{c}")));
    names
}

pub fn metric_value(report: &EvalReport, metric: &str, classes: &[String]) -> Option<f64> {
    match metric {
        "accuracy" => Some(report.accuracy),
        "f1_macro" => Some(report.f1_macro),
        "miou" => Some(report.miou),
        other => {
            let class = other.strip_prefix("recall/")?;
            let i = classes.iter().position(|c| c == class)?;
            report.class_recall(i)
        }
    }
}

pub(crate) fn without_seed(setting: &Setting) -> Setting {
    let mut s = setting.clone();
    s.remove("seed");
    s
}

/// Groups completed cells by setting without seed, in first-seen order.
pub(crate) fn seed_groups(records: &[CellRecord]) -> Vec<(Setting, Vec<&CellRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Setting, Vec<&CellRecord>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status != CellStatus::Failed && r.report.is_some()) {
        let key_setting = without_seed(&r.setting);
        let key = canonical_json(&serde_json::to_value(&key_setting).expect("setting serializes"));
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                (key_setting, Vec::new())
            })
            .1
            .push(r);
    }
    order.into_iter().map(|k| groups.remove(&k).expect("group exists")).collect()
}

/// One aggregate per (setting, test set, metric) with at least one value.
/// Failed cells are left out.
pub fn aggregate(records: &[CellRecord], classes: &[String]) -> Vec<Aggregate> {
    let metrics = metric_names(classes);
    let mut out = Vec::new();
    for (setting, members) in seed_groups(records) {
        let mut tests: Vec<&String> = members
            .iter()
            .flat_map(|r| r.report.as_ref().expect("completed").eval.keys())
            .collect();
        tests.sort();
        tests.dedup();
        for test in tests {
            for metric in &metrics {
                let mut values = Vec::new();
                let mut cells = Vec::new();
                for r in &members {
                    let rep = r.report.as_ref().expect("completed");
                    if let Some(v) = rep.eval.get(test).and_then(|e| metric_value(e, metric, classes)) {
                        values.push(v);
                        cells.push(r.digest.clone());
                    }
                }
                if values.is_empty() {
                    continue;
                }
                let (mean, ci95) = mean_ci(&values);
                out.push(Aggregate {
                    setting: setting.clone(),
                    test_set: test.clone(),
                    metric: metric.clone(),
                    n: values.len(),
                    mean,
                    ci95,
                    values,
                    cells,
                });
            }
        }
    }
    out
}
