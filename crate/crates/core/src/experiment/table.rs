use std::fmt;
use std::str::FromStr;

use serde_json::Value;

use super::aggregate::Aggregate;
use super::config::{Setting, AXES};
use super::run::SweepResult;
use super::ExperimentError;
use crate::losses::LossKind;
use crate::taxonomy::display_name;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl FromStr for TableFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown table format `{other}`")),
        }
    }
}

/// `axis=value` filters; a setting matches when every filter does.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection(pub Vec<(String, String)>);

pub(crate) fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Selection {
    pub fn parse<S: AsRef<str>>(filters: &[S]) -> Result<Self, ExperimentError> {
        filters
            .iter()
            .map(|f| {
                let (k, v) = f
                    .as_ref()
                    .split_once('=')
                    .ok_or_else(|| ExperimentError::Config(format!("filter `{}` is not axis=value", f.as_ref())))?;
                Ok((k.trim().to_string(), v.trim().to_string()))
            })
            .collect::<Result<_, _>>()
            .map(Selection)
    }

    pub fn check_axes(&self, axes: &[String]) -> Result<(), ExperimentError> {
        match self.0.iter().find(|(k, _)| !axes.contains(k)) {
            Some((k, _)) => Err(ExperimentError::MissingAxis(k.clone())),
            None => Ok(()),
        }
    }

    pub fn matches(&self, setting: &Setting) -> bool {
        self.0.iter().all(|(k, want)| {
            setting.get(k).is_some_and(|v| {
                let have = render(v);
                match (have.parse::<f64>(), want.parse::<f64>()) {
                    (Ok(a), Ok(b)) => a == b,
                    _ => have == *want,
                }
            })
        })
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("the whole sweep");
        }
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(", "))
    }
}

pub(crate) fn axis_title(axis: &str) -> &'static str {
    match axis {
        "train_set" => "Train Set",
        "backbone_family" => "Backbone",
        "pretrain_source" => "Pretraining",
        "loss_kind" => "Loss Function",
        "m2020_proportion" => "M2020 Proportion",
        "label_fraction" => "Label Fraction",
        _ => "Seed",
    }
}

pub(crate) fn axis_cell(axis: &str, v: &Value) -> String {
    let s = render(v);
    if axis == "loss_kind" {
        if let Ok(k) = s.parse::<LossKind>() {
            return k.label().to_string();
        }
    }
    s
}

/// Groups of aggregates sharing a setting, in sweep order, after `selection`.
pub(crate) fn selected_settings<'a>(result: &'a SweepResult, selection: &Selection) -> Vec<&'a Setting> {
    let mut out: Vec<&Setting> = Vec::new();
    for a in &result.aggregates {
        if selection.matches(&a.setting) && !out.contains(&&a.setting) {
            out.push(&a.setting);
        }
    }
    out
}

fn find<'a>(result: &'a SweepResult, setting: &Setting, test: &str, metric: &str) -> Option<&'a Aggregate> {
    result
        .aggregates
        .iter()
        .find(|a| &a.setting == setting && a.test_set == test && a.metric == metric)
}

/// Settings as rows; accuracy, macro F1, mIoU and the recall of the
/// configured class as columns, per test set.
pub fn emit_table(result: &SweepResult, format: TableFormat, selection: &Selection) -> Result<String, ExperimentError> {
    selection.check_axes(&result.axes)?;
    let settings = selected_settings(result, selection);
    if settings.is_empty() {
        return Err(ExperimentError::EmptySelection(selection.to_string()));
    }
    let axes: Vec<&str> = AXES
        .iter()
        .copied()
        .filter(|a| *a != "seed" && result.axes.iter().any(|x| x == a))
        .collect();
    let tests: Vec<&String> = result
        .test_sets
        .iter()
        .filter(|t| settings.iter().any(|s| find(result, s, t, "accuracy").is_some()))
        .collect();

    let mut metrics: Vec<(String, String)> = vec![
        ("accuracy".into(), "Accuracy".into()),
        ("f1_macro".into(), "F1 Macro".into()),
        ("miou".into(), "mIoU".into()),
    ];
    if let Some(c) = &result.recall_class {
        metrics.push((format!("recall/{c}"), format!("{} Recall", display_name(c))));
    }

    let mut header: Vec<String> = if axes.is_empty() {
        vec!["Setting".into()]
    } else {
        axes.iter().map(|a| axis_title(a).to_string()).collect()
    };
    header.push("Seeds".into());
    for t in &tests {
        for (_, title) in &metrics {
            let col = if tests.len() > 1 { format!("{} {title}", t.to_uppercase()) } else { title.clone() };
            if format == TableFormat::Csv {
                header.push(col.clone());
                header.push(format!("{col} CI95"));
            } else {
                header.push(col);
            }
        }
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for s in &settings {
        let mut row: Vec<String> = if axes.is_empty() {
            vec!["base".into()]
        } else {
            axes.iter().map(|a| s.get(*a).map(|v| axis_cell(a, v)).unwrap_or_default()).collect()
        };
        let seeds = tests.first().and_then(|t| find(result, s, t, "accuracy")).map_or(0, |a| a.n);
        row.push(seeds.to_string());
        for t in &tests {
            for (m, _) in &metrics {
                let a = find(result, s, t, m);
                match format {
                    TableFormat::Markdown => row.push(match a {
                        None => "n/a".into(),
                        Some(a) => match a.half_width() {
                            Some(h) => format!("{:.3} ± {:.3}", a.mean, h),
                            None => format!("{:.3}", a.mean),
                        },
                    }),
                    TableFormat::Csv => {
                        row.push(a.map(|a| format!("{}", a.mean)).unwrap_or_default());
                        row.push(a.and_then(Aggregate::half_width).map(|h| format!("{h}")).unwrap_or_default());
                    }
                }
            }
        }
        rows.push(row);
    }

    Ok(match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            let rule: Vec<String> = header
                .iter()
                .enumerate()
                .map(|(i, _)| if i < axes.len().max(1) { "---".into() } else { "---:".into() })
                .collect();
            out.push_str(&format!("| {} |\n", rule.join(" | ")));
            for r in rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory csv");
            for r in rows {
                w.write_record(&r).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
        }
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::experiment::aggregate::aggregate;
    use crate::experiment::run::{CellRecord, CellReport, CellStatus};
    use crate::experiment::{CellConfig, ExperimentConfig};
    use crate::metrics::{derive_metrics, ConfusionMatrix};
    use std::collections::BTreeMap;

    /// A result with four loss settings over `seeds`, built without training.
    pub(crate) fn fake_result(seeds: &[u64]) -> SweepResult {
        let cfg = ExperimentConfig::parse(
            "[data.synthetic]\nkind = \"geometric\"\n[backbone]\nfamily = \"toy\"\npretrain_source = \"random\"\n",
        )
        .unwrap();
        let base: CellConfig = cfg.grid().unwrap().cells.remove(0).config;
        let classes: Vec<String> = ["soil", "bedrock", "sand", "big_rock"].iter().map(|s| s.to_string()).collect();
        let mut records = Vec::new();
        for (k, kind) in LossKind::ALL.iter().enumerate() {
            for &seed in seeds {
                let d = 10 + k as u64;
                let cm = ConfusionMatrix::from_counts(
                    4,
                    vec![d, 1, 0, 1, 0, d, 1, 0, 1, 0, d, 0, 2, 0, 0, 1 + k as u64 + seed],
                )
                .unwrap();
                let mut setting = Setting::new();
                setting.insert("loss_kind".into(), Value::String(kind.to_string()));
                setting.insert("seed".into(), Value::from(seed));
                let digest = format!("{k}-{seed}");
                records.push(CellRecord {
                    digest: digest.clone(),
                    setting: setting.clone(),
                    status: CellStatus::Completed,
                    error: None,
                    report: Some(CellReport {
                        digest,
                        setting,
                        config: base.clone(),
                        train_images: 10,
                        train_domains: BTreeMap::from([("msl".into(), 10)]),
                        train_manifest_hash: "h".into(),
                        train_class_pixels: BTreeMap::from([("msl".into(), vec![5, 4, 3, 1])]),
                        trainable_parameters: 1000 * (k + 1),
                        history: Vec::new(),
                        final_train_loss: None,
                        eval: BTreeMap::from([("m2020".into(), derive_metrics(&cm).unwrap())]),
                        classes: classes.clone(),
                        seconds: 0.0,
                    }),
                });
            }
        }
        let aggregates = aggregate(&records, &classes);
        SweepResult {
            name: "fake".into(),
            output_dir: ".".into(),
            axes: vec!["loss_kind".into(), "seed".into()],
            classes,
            recall_class: Some("big_rock".into()),
            test_sets: vec!["m2020".into()],
            reference_lines: Vec::new(),
            records,
            aggregates,
            failed: Vec::new(),
        }
    }

    #[test]
    fn loss_table_has_four_rows_and_big_rock_column() {
        let res = fake_result(&[1]);
        let md = emit_table(&res, TableFormat::Markdown, &Selection::default()).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "| Loss Function | Seeds | Accuracy | F1 Macro | mIoU | Big Rock Recall |");
        assert!(lines[2].starts_with("| Cross Entropy | 1 |"));
        assert!(lines[5].starts_with("| Inverse Frequency + Recall CE |"));
        assert!(!md.contains('±'));
    }

    #[test]
    fn multi_seed_rows_carry_intervals() {
        let res = fake_result(&[1, 2, 3]);
        let md = emit_table(&res, TableFormat::Markdown, &Selection::default()).unwrap();
        assert!(md.lines().nth(2).unwrap().contains(" 3 |"));
        assert!(md.contains('±'));
        let csv = emit_table(&res, TableFormat::Csv, &Selection::default()).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().next().unwrap().contains("Big Rock Recall CI95"));
    }

    #[test]
    fn selections_filter_and_report_emptiness() {
        let res = fake_result(&[1]);
        let sel = Selection::parse(&["loss_kind=recall"]).unwrap();
        let md = emit_table(&res, TableFormat::Markdown, &sel).unwrap();
        assert_eq!(md.lines().count(), 3);
        let none = Selection::parse(&["loss_kind=focal"]).unwrap();
        let err = emit_table(&res, TableFormat::Markdown, &none).unwrap_err();
        assert!(err.to_string().starts_with("EMPTY_SELECTION"));
        let bad = Selection::parse(&["backbone_family=toy"]).unwrap();
        assert!(matches!(emit_table(&res, TableFormat::Csv, &bad), Err(ExperimentError::MissingAxis(_))));
    }
}
