//! SVG figures from sweep results.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::coord::ranged1d::SegmentValue;
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

use super::aggregate::{seed_groups, Aggregate};
use super::config::{ReferenceLine, Setting};
use super::run::SweepResult;
use super::table::{axis_cell, axis_title, Selection};
use super::ExperimentError;
use crate::metrics::ConfusionMatrix;
use crate::taxonomy::display_name;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    ProportionCurve,
    LabelFractionCurve,
    ConfusionHeatmap,
    ClassDistribution,
    ModelSizeCurve,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::ProportionCurve,
        PlotKind::LabelFractionCurve,
        PlotKind::ConfusionHeatmap,
        PlotKind::ClassDistribution,
        PlotKind::ModelSizeCurve,
    ];

    fn tag(self) -> &'static str {
        match self {
            PlotKind::ProportionCurve => "proportion_curve",
            PlotKind::LabelFractionCurve => "label_fraction_curve",
            PlotKind::ConfusionHeatmap => "confusion_heatmap",
            PlotKind::ClassDistribution => "class_distribution",
            PlotKind::ModelSizeCurve => "model_size_curve",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PlotKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        PlotKind::ALL
            .into_iter()
            .find(|k| k.tag() == norm)
            .ok_or_else(|| format!("unknown plot kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOptions {
    /// Metrics drawn by the curve kinds.
    pub metrics: Vec<String>,
    pub selection: Selection,
    /// Drawn in addition to the sweep's configured lines.
    pub references: Vec<ReferenceLine>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            metrics: vec!["accuracy".into(), "f1_macro".into()],
            selection: Selection::default(),
            references: Vec::new(),
        }
    }
}

fn perr<E: fmt::Display>(e: E) -> ExperimentError {
    ExperimentError::Plot(e.to_string())
}

fn metric_title(metric: &str) -> String {
    match metric {
        "accuracy" => "Pixel Accuracy".into(),
        "f1_macro" => "F1 Macro".into(),
        "miou" => "mIoU".into(),
        other => match other.strip_prefix("recall/") {
            Some(c) => format!("{} Recall", display_name(c)),
            None => other.into(),
        },
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn setting_label(setting: &Setting) -> String {
    if setting.is_empty() {
        return "all".into();
    }
    setting
        .iter()
        .map(|(k, v)| format!("{}={}", axis_title(k), axis_cell(k, v)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn setting_slug(setting: &Setting) -> String {
    if setting.is_empty() {
        return "all".into();
    }
    slug(
        &setting
            .iter()
            .map(|(k, v)| format!("{k}-{}", super::table::render(v)))
            .collect::<Vec<_>>()
            .join("_"),
    )
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Row-normalized confusion matrix; rows without support stay zero.
pub fn confusion_intensities(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.row_normalized()
}

struct Series {
    label: String,
    /// `(x, mean, interval)`, sorted by x.
    points: Vec<(f64, f64, Option<(f64, f64)>)>,
}

struct Curve<'a> {
    title: String,
    x_title: &'static str,
    y_title: String,
    log_x: bool,
    series: Vec<Series>,
    references: Vec<&'a ReferenceLine>,
}

fn draw_curve(path: &Path, c: &Curve<'_>) -> Result<(), ExperimentError> {
    let tx = |x: f64| if c.log_x { x.log10() } else { x };
    let xs: Vec<f64> = c.series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))).collect();
    let mut ys: Vec<f64> = c
        .series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [Some(p.1), p.2.map(|i| i.0), p.2.map(|i| i.1)]).flatten())
        .collect();
    ys.extend(c.references.iter().map(|r| r.value));
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let xpad = if x1 > x0 { (x1 - x0) * 0.04 } else { 0.5 };
    (x0, x1) = (x0 - xpad, x1 + xpad);
    let ypad = if y1 > y0 { (y1 - y0) * 0.08 } else { 0.05 };
    (y0, y1) = ((y0 - ypad).max(0.0), (y1 + ypad).min(1.0));
    if y1 <= y0 {
        (y0, y1) = (0.0, 1.0);
    }

    let root = SVGBackend::new(path, (860, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&c.title, ("sans-serif", 22))
        .margin(14)
        .x_label_area_size(46)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(perr)?;
    let log_x = c.log_x;
    chart
        .configure_mesh()
        .x_desc(c.x_title)
        .y_desc(c.y_title.as_str())
        .x_label_formatter(&|v| fmt_tick(if log_x { 10f64.powf(*v) } else { *v }))
        .y_label_formatter(&|v| fmt_tick(*v))
        .draw()
        .map_err(perr)?;

    for (i, s) in c.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if s.points.len() > 1 && s.points.iter().all(|p| p.2.is_some()) {
            let mut band: Vec<(f64, f64)> = s.points.iter().map(|p| (tx(p.0), p.2.unwrap().1)).collect();
            band.extend(s.points.iter().rev().map(|p| (tx(p.0), p.2.unwrap().0)));
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                .map_err(perr)?;
        }
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (tx(p.0), p.1)), color.stroke_width(2)))
            .map_err(perr)?
            .label(s.label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|p| Circle::new((tx(p.0), p.1), 3, color.filled())))
            .map_err(perr)?;
    }
    for r in &c.references {
        chart
            .draw_series(DashedLineSeries::new(vec![(x0, r.value), (x1, r.value)], 8, 5, BLACK.stroke_width(2)))
            .map_err(perr)?
            .label(r.label.as_str())
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(perr)?;
    root.present().map_err(perr)
}

fn curves(
    result: &SweepResult,
    kind: PlotKind,
    dir: &Path,
    opts: &PlotOptions,
    references: &[ReferenceLine],
) -> Result<Vec<PathBuf>, ExperimentError> {
    let (axis, x_title, log_x) = match kind {
        PlotKind::ProportionCurve => ("m2020_proportion", "M2020 proportion", false),
        PlotKind::LabelFractionCurve => ("label_fraction", "Fraction of labeled images", true),
        _ => ("backbone_family", "Trainable parameters", true),
    };
    if !result.axes.iter().any(|a| a == axis) {
        return Err(ExperimentError::MissingAxis(axis.into()));
    }
    let x_of = |a: &Aggregate| -> Option<f64> {
        if kind == PlotKind::ModelSizeCurve {
            a.cells.first().and_then(|d| result.report(d)).map(|r| r.trainable_parameters as f64)
        } else {
            a.setting.get(axis).and_then(|v| v.as_f64())
        }
    };

    let mut written = Vec::new();
    let mut any = false;
    for test in &result.test_sets {
        for metric in &opts.metrics {
            let mut groups: BTreeMap<String, Series> = BTreeMap::new();
            let mut order = Vec::new();
            for a in result
                .aggregates
                .iter()
                .filter(|a| &a.test_set == test && &a.metric == metric && opts.selection.matches(&a.setting))
            {
                let Some(x) = x_of(a) else { continue };
                let mut key = a.setting.clone();
                key.remove(axis);
                let label = if key.is_empty() { metric_title(metric) } else { setting_label(&key) };
                if !groups.contains_key(&label) {
                    order.push(label.clone());
                }
                groups
                    .entry(label.clone())
                    .or_insert_with(|| Series { label, points: Vec::new() })
                    .points
                    .push((x, a.mean, a.ci95));
            }
            if groups.is_empty() {
                continue;
            }
            any = true;
            let mut series: Vec<Series> = order.into_iter().map(|k| groups.remove(&k).expect("series exists")).collect();
            for s in &mut series {
                s.points.sort_by(|p, q| p.0.total_cmp(&q.0));
            }
            let refs: Vec<&ReferenceLine> = references
                .iter()
                .filter(|r| &r.metric == metric && r.test_set.as_ref().is_none_or(|t| t == test))
                .collect();
            let path = dir.join(format!("{}_{}_{}.svg", kind, slug(metric), slug(test)));
            draw_curve(
                &path,
                &Curve {
                    title: format!("{} on {} test set", metric_title(metric), test.to_uppercase()),
                    x_title,
                    y_title: metric_title(metric),
                    log_x,
                    series,
                    references: refs,
                },
            )?;
            written.push(path);
        }
    }
    if !any {
        return Err(ExperimentError::EmptySelection(opts.selection.to_string()));
    }
    Ok(written)
}

fn heat(v: f64) -> RGBColor {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

fn seg_end(k: i32, n: i32) -> SegmentValue<i32> {
    if k >= n {
        SegmentValue::Last
    } else {
        SegmentValue::Exact(k)
    }
}

fn draw_heatmap(path: &Path, title: &str, classes: &[String], m: &[Vec<f64>]) -> Result<(), ExperimentError> {
    let n = classes.len() as i32;
    let names: Vec<String> = classes.iter().map(|c| display_name(c)).collect();
    let root = SVGBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(14)
        .x_label_area_size(50)
        .y_label_area_size(100)
        .build_cartesian_2d((0..n - 1).into_segmented(), (0..n - 1).into_segmented())
        .map_err(perr)?;
    let label = |v: &SegmentValue<i32>, flip: bool| match v {
        SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => {
            let idx = if flip { n - 1 - i } else { *i };
            names.get(idx as usize).cloned().unwrap_or_default()
        }
        SegmentValue::Last => String::new(),
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("Predicted")
        .y_desc("Ground truth")
        .x_labels(n as usize)
        .y_labels(n as usize)
        .x_label_formatter(&|v| label(v, false))
        .y_label_formatter(&|v| label(v, true))
        .draw()
        .map_err(perr)?;
    let mut cells = Vec::new();
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            cells.push((r as i32, c as i32, v));
        }
    }
    chart
        .draw_series(cells.iter().map(|&(r, c, v)| {
            let y = n - 1 - r;
            Rectangle::new([(SegmentValue::Exact(c), seg_end(y + 1, n)), (seg_end(c + 1, n), SegmentValue::Exact(y))], heat(v).filled())
        }))
        .map_err(perr)?;
    let centered = Pos::new(HPos::Center, VPos::Center);
    chart
        .draw_series(cells.iter().map(|&(r, c, v)| {
            let color = if v > 0.5 { WHITE } else { BLACK };
            Text::new(
                format!("{v:.2}"),
                (SegmentValue::CenterOf(c), SegmentValue::CenterOf(n - 1 - r)),
                ("sans-serif", 16).into_font().color(&color).pos(centered),
            )
        }))
        .map_err(perr)?;
    root.present().map_err(perr)
}

fn heatmaps(result: &SweepResult, dir: &Path, opts: &PlotOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut written = Vec::new();
    for (setting, members) in seed_groups(&result.records) {
        if !opts.selection.matches(&setting) {
            continue;
        }
        for test in &result.test_sets {
            let mut sum: Option<ConfusionMatrix> = None;
            for r in &members {
                if let Some(rep) = r.report.as_ref().and_then(|rep| rep.eval.get(test)) {
                    sum = Some(match sum {
                        None => rep.confusion.clone(),
                        Some(acc) => crate::metrics::merge(&acc, &rep.confusion).map_err(perr)?,
                    });
                }
            }
            let Some(cm) = sum else { continue };
            let path = dir.join(format!("confusion_heatmap_{}_{}.svg", slug(test), setting_slug(&setting)));
            let title = format!("{} test set, {} (accuracy {:.1}%)", test.to_uppercase(), setting_label(&setting), {
                100.0 * cm.trace() as f64 / cm.total().max(1) as f64
            });
            draw_heatmap(&path, &title, &result.classes, &confusion_intensities(&cm))?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(ExperimentError::EmptySelection(opts.selection.to_string()));
    }
    Ok(written)
}

fn class_distribution(result: &SweepResult, dir: &Path, opts: &PlotOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut written = Vec::new();
    let mut seen = Vec::new();
    for rep in result.reports().filter(|r| opts.selection.matches(&r.setting)) {
        if seen.contains(&rep.train_manifest_hash) {
            continue;
        }
        seen.push(rep.train_manifest_hash.clone());
        let domains: Vec<(&String, &Vec<u64>)> = rep.train_class_pixels.iter().collect();
        let k = domains.len() as i32;
        let n = result.classes.len() as i32;
        let rows = n * k;
        if rows == 0 {
            continue;
        }
        let mp = |c: u64| c as f64 / 1e6;
        let max = domains.iter().flat_map(|(_, v)| v.iter().map(|&c| mp(c))).fold(0.0, f64::max);
        let path = dir.join(format!("class_distribution_{}.svg", &rep.train_manifest_hash[..12.min(rep.train_manifest_hash.len())]));
        let root = SVGBackend::new(&path, (820, 120 + 34 * rows as u32)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("Class distribution of the training set ({} images)", rep.train_images), ("sans-serif", 20))
            .margin(14)
            .x_label_area_size(44)
            .y_label_area_size(150)
            .build_cartesian_2d(0.0..(max * 1.1).max(1e-6), (0..rows - 1).into_segmented())
            .map_err(perr)?;
        let row_name = |j: i32| {
            let j = rows - 1 - j;
            let (class, d) = (j / k, j % k);
            format!("{} ({})", display_name(&result.classes[class as usize]), domains[d as usize].0.to_uppercase())
        };
        chart
            .configure_mesh()
            .disable_y_mesh()
            .x_desc("Labeled pixels (megapixels)")
            .y_labels(rows as usize)
            .y_label_formatter(&|v| match v {
                SegmentValue::CenterOf(j) | SegmentValue::Exact(j) => row_name(*j),
                SegmentValue::Last => String::new(),
            })
            .x_label_formatter(&|v| fmt_tick(*v))
            .draw()
            .map_err(perr)?;
        for (d, (name, counts)) in domains.iter().enumerate() {
            let color = Palette99::pick(d).to_rgba();
            chart
                .draw_series(counts.iter().enumerate().map(|(c, &v)| {
                    let y = rows - 1 - (c as i32 * k + d as i32);
                    Rectangle::new([(0.0, seg_end(y + 1, rows)), (mp(v), SegmentValue::Exact(y))], color.filled())
                }))
                .map_err(perr)?
                .label(name.to_uppercase())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(perr)?;
        root.present().map_err(perr)?;
        written.push(path.clone());
    }
    if written.is_empty() {
        return Err(ExperimentError::EmptySelection(opts.selection.to_string()));
    }
    Ok(written)
}

/// Writes the figures of `kind` into `dir` and returns their paths.
///
/// Curves get one file per (metric, test set): the seed mean as a line and,
/// where every point has at least two seeds, a shaded 95% band.
pub fn plot_sweep(result: &SweepResult, kind: PlotKind, dir: &Path, opts: &PlotOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    opts.selection.check_axes(&result.axes)?;
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    match kind {
        PlotKind::ProportionCurve | PlotKind::LabelFractionCurve | PlotKind::ModelSizeCurve => {
            let mut refs = result.reference_lines.clone();
            refs.extend(opts.references.iter().cloned());
            curves(result, kind, dir, opts, &refs)
        }
        PlotKind::ConfusionHeatmap => heatmaps(result, dir, opts),
        PlotKind::ClassDistribution => class_distribution(result, dir, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::table::tests::fake_result;
    use serde_json::Value;

    fn with_fraction_axis(seeds: &[u64]) -> SweepResult {
        let mut res = fake_result(seeds);
        for r in &mut res.records {
            let k = r.digest.chars().next().unwrap().to_digit(10).unwrap();
            let f = [0.01, 0.1, 0.5, 1.0][k as usize];
            r.setting.remove("loss_kind");
            r.setting.insert("label_fraction".into(), Value::from(f));
            if let Some(rep) = &mut r.report {
                rep.setting = r.setting.clone();
            }
        }
        res.axes = vec!["label_fraction".into(), "seed".into()];
        res.aggregates = crate::experiment::aggregate(&res.records, &res.classes);
        res
    }

    #[test]
    fn single_seed_curves_have_no_band() {
        let tmp = tempfile::tempdir().unwrap();
        let res = with_fraction_axis(&[1]);
        let files = plot_sweep(&res, PlotKind::LabelFractionCurve, tmp.path(), &PlotOptions::default()).unwrap();
        assert_eq!(files.len(), 2);
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
        assert!(!svg.contains("<polygon"));
    }

    #[test]
    fn multi_seed_curves_have_bands_and_reference_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let res = with_fraction_axis(&[1, 2, 3]);
        let opts = PlotOptions {
            references: vec![ReferenceLine {
                label: "full set".into(),
                metric: "accuracy".into(),
                test_set: None,
                value: 0.8,
            }],
            ..Default::default()
        };
        let files = plot_sweep(&res, PlotKind::LabelFractionCurve, tmp.path(), &opts).unwrap();
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("full set"));
    }

    #[test]
    fn missing_axes_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let res = fake_result(&[1]);
        for kind in [PlotKind::ProportionCurve, PlotKind::LabelFractionCurve, PlotKind::ModelSizeCurve] {
            let err = plot_sweep(&res, kind, tmp.path(), &PlotOptions::default()).unwrap_err();
            assert!(err.to_string().starts_with("MISSING_AXIS"), "{err}");
        }
    }

    #[test]
    fn diagonal_confusion_gives_identity_intensities() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 7, 0, 0, 0, 2]).unwrap();
        let m = confusion_intensities(&cm);
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let tmp = tempfile::tempdir().unwrap();
        let classes: Vec<String> = ["soil", "bedrock", "sand"].iter().map(|s| s.to_string()).collect();
        let path = tmp.path().join("h.svg");
        draw_heatmap(&path, "diag", &classes, &m).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("1.00").count(), 3);
        assert_eq!(svg.matches("0.00").count(), 6);
    }

    #[test]
    fn heatmaps_and_distributions_are_written() {
        let tmp = tempfile::tempdir().unwrap();
        let res = fake_result(&[1, 2]);
        let maps = plot_sweep(&res, PlotKind::ConfusionHeatmap, tmp.path(), &PlotOptions::default()).unwrap();
        assert_eq!(maps.len(), 4);
        let dist = plot_sweep(&res, PlotKind::ClassDistribution, tmp.path(), &PlotOptions::default()).unwrap();
        assert_eq!(dist.len(), 1);
        assert!(fs::read_to_string(&dist[0]).unwrap().contains("Big Rock (MSL)"));
        let sel = PlotOptions {
            selection: Selection::parse(&["loss_kind=nothing"]).unwrap(),
            ..Default::default()
        };
        assert!(matches!(
            plot_sweep(&res, PlotKind::ConfusionHeatmap, tmp.path(), &sel),
            Err(ExperimentError::EmptySelection(_))
        ));
    }

    #[test]
    fn model_size_curve_uses_parameter_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut res = fake_result(&[1]);
        for r in &mut res.records {
            let fam = ["mobilenet_v2", "resnet_50", "resnet_101", "resnet_101_2x"][r.digest[..1].parse::<usize>().unwrap()];
            r.setting.remove("loss_kind");
            r.setting.insert("backbone_family".into(), Value::from(fam));
        }
        res.axes = vec!["backbone_family".into(), "seed".into()];
        res.aggregates = crate::experiment::aggregate(&res.records, &res.classes);
        let files = plot_sweep(&res, PlotKind::ModelSizeCurve, tmp.path(), &PlotOptions::default()).unwrap();
        assert_eq!(files.len(), 2);
    }
}
