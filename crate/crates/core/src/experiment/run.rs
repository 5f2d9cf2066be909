//! Grid execution and the on-disk result layout.
//!
//! ```text
//! <out>/sweep.json              name, axes, classes, test sets
//! <out>/grid.json               every cell's setting and resolved config
//! <out>/cells/<digest>/report.json
//! <out>/summary.jsonl           one line per cell, in grid order
//! <out>/aggregates.json         seed aggregates and failed cells
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, metric_names, metric_value, Aggregate};
use super::config::{Cell, CellConfig, DataConfig, Dtype, ExperimentGrid, ReferenceLine, Setting, TrainSet};
use super::ExperimentError;
use crate::composition::{compose_mixed, sample_label_fraction, CompositionSpec, LabelFractionSpec};
use crate::ingest::DatasetManifest;
use crate::metrics::EvalReport;
use crate::nn::{build_model_with_seed, count_values, PretrainSource};
use crate::scalar::Scalar;
use crate::synthetic::write_dataset;
use crate::taxonomy::{class_pixel_histogram, make_taxonomy, Domain, TerrainSample};
use crate::train::{evaluate, finetune, Dataset, EpochRecord};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parallel cells.
    pub workers: usize,
    /// Data root used when the config has none.
    pub data_root: Option<PathBuf>,
}

/// Everything persisted for a finished cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub digest: String,
    pub setting: Setting,
    pub config: CellConfig,
    pub train_images: usize,
    pub train_domains: BTreeMap<String, usize>,
    pub train_manifest_hash: String,
    /// Labeled pixels per class at native resolution, per domain.
    pub train_class_pixels: BTreeMap<String, Vec<u64>>,
    pub trainable_parameters: usize,
    pub history: Vec<EpochRecord>,
    pub final_train_loss: Option<f64>,
    pub eval: BTreeMap<String, EvalReport>,
    pub classes: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    /// A valid report from an earlier run was reused.
    Resumed,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub digest: String,
    pub setting: Setting,
    pub status: CellStatus,
    pub error: Option<String>,
    pub report: Option<CellReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub digest: String,
    pub setting: Setting,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SummaryLine {
    digest: String,
    setting: Setting,
    status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<String>,
    #[serde(default)]
    metrics: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepMeta {
    name: String,
    axes: Vec<String>,
    classes: Vec<String>,
    recall_class: Option<String>,
    test_sets: Vec<String>,
    reference_lines: Vec<ReferenceLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AggregateFile {
    name: String,
    failed_cells: Vec<FailedCell>,
    aggregates: Vec<Aggregate>,
}

/// Outcome of a sweep, either fresh or reloaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub name: String,
    pub output_dir: PathBuf,
    pub axes: Vec<String>,
    pub classes: Vec<String>,
    pub recall_class: Option<String>,
    pub test_sets: Vec<String>,
    pub reference_lines: Vec<ReferenceLine>,
    pub records: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    pub failed: Vec<FailedCell>,
}

impl SweepResult {
    pub fn reports(&self) -> impl Iterator<Item = &CellReport> {
        self.records.iter().filter_map(|r| r.report.as_ref())
    }

    pub fn report(&self, digest: &str) -> Option<&CellReport> {
        self.reports().find(|r| r.digest == digest)
    }
}

/// Source pools and test sets, with refs relative to `root`.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub root: PathBuf,
    pub msl_train: Option<DatasetManifest>,
    pub m2020_train: Option<DatasetManifest>,
    pub tests: BTreeMap<String, DatasetManifest>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("result serializes");
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| ExperimentError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ExperimentError::io(path, e))
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn canonical_dir(path: &Path) -> Result<PathBuf, ExperimentError> {
    fs::canonicalize(path).map_err(|e| ExperimentError::MissingInput(format!("{}: {e}", path.display())))
}

/// Re-expresses every ref relative to `root` where possible.
fn rebase(m: &DatasetManifest, root: &Path) -> Result<DatasetManifest, ExperimentError> {
    let base = canonical_dir(m.base_dir().unwrap_or(Path::new(".")))?;
    let rel = |r: &str| {
        let full = base.join(r);
        full.strip_prefix(root).unwrap_or(&full).to_string_lossy().into_owned()
    };
    let entries = m
        .entries()
        .iter()
        .map(|e| TerrainSample {
            image_ref: rel(&e.image_ref),
            mask_ref: rel(&e.mask_ref),
            ..e.clone()
        })
        .collect();
    let mut out = DatasetManifest::new(m.dataset_id(), m.taxonomy_variant(), entries).with_base_dir(root);
    if let Some(seed) = m.seed() {
        out = out.with_seed(seed);
    }
    Ok(out)
}

fn materialize_synthetic(data: &DataConfig, dir: &Path) -> Result<Inputs, ExperimentError> {
    let s = data.synthetic.as_ref().expect("synthetic data configured");
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let root = canonical_dir(dir)?;
    let mut pools = BTreeMap::new();
    for (name, spec) in s.pools() {
        let sub = root.join(name);
        let spec_file = sub.join("spec.json");
        let fresh = read_json::<crate::synthetic::SyntheticSpec>(&spec_file).ok().as_ref() == Some(&spec)
            && sub.join("manifest.tsv").is_file();
        let manifest = if fresh {
            DatasetManifest::read(&sub.join("manifest.tsv"))?
        } else {
            let m = write_dataset(&sub, &spec)?;
            write_json(&spec_file, &spec)?;
            m
        };
        pools.insert(name, rebase(&manifest, &root)?);
    }
    let mut take = |k: &str| pools.remove(k).expect("all pools generated");
    let (msl, m2020) = (take("msl_train"), take("m2020_train"));
    let tests = BTreeMap::from([("msl".to_string(), take("msl_test")), ("m2020".to_string(), take("m2020_test"))]);
    Ok(Inputs {
        root,
        msl_train: (!msl.is_empty()).then_some(msl),
        m2020_train: (!m2020.is_empty()).then_some(m2020),
        tests,
    })
}

fn data_root(grid: &ExperimentGrid, opts: &RunOptions) -> PathBuf {
    grid.data
        .root
        .clone()
        .or_else(|| opts.data_root.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads or generates every manifest the grid refers to and checks that
/// all weight files exist.
pub fn prepare_inputs(grid: &ExperimentGrid, opts: &RunOptions) -> Result<Inputs, ExperimentError> {
    let inputs = if grid.data.synthetic.is_some() {
        materialize_synthetic(&grid.data, &grid.output_dir.join("data"))?
    } else {
        let root = canonical_dir(&data_root(grid, opts))?;
        let load = |p: &PathBuf| -> Result<DatasetManifest, ExperimentError> {
            let path = root.join(p);
            if !path.is_file() {
                return Err(ExperimentError::MissingInput(format!("manifest {}", path.display())));
            }
            rebase(&DatasetManifest::read(&path)?, &root)
        };
        let mut tests = BTreeMap::new();
        for (name, p) in &grid.data.test {
            tests.insert(name.clone(), load(p)?);
        }
        Inputs {
            msl_train: grid.data.msl_train.as_ref().map(load).transpose()?,
            m2020_train: grid.data.m2020_train.as_ref().map(load).transpose()?,
            tests,
            root,
        }
    };
    for cell in &grid.cells {
        let b = &cell.config.backbone;
        if b.pretrain_source == PretrainSource::Random {
            continue;
        }
        match b.weights_path(&inputs.root) {
            Some(p) if p.is_file() => {}
            Some(p) => return Err(ExperimentError::MissingInput(format!("weights {}", p.display()))),
            None => {
                return Err(ExperimentError::MissingInput(format!(
                    "no weights configured for {}/{}",
                    b.family, b.pretrain_source
                )))
            }
        }
    }
    Ok(inputs)
}

fn single_domain(m: &DatasetManifest, domain: Domain) -> DatasetManifest {
    let mut out = DatasetManifest::new(format!("{}-{domain}", m.dataset_id()), m.taxonomy_variant(), m.domain_entries(domain));
    if let Some(b) = m.base_dir() {
        out = out.with_base_dir(b);
    }
    out
}

/// The training manifest of one cell: base set, then label fraction.
pub fn compose_train_set(config: &CellConfig, inputs: &Inputs) -> Result<DatasetManifest, ExperimentError> {
    let c = &config.composition;
    let need = |m: &Option<DatasetManifest>, what: &str| {
        m.clone()
            .ok_or_else(|| ExperimentError::MissingInput(format!("{what} training pool is empty or not configured")))
    };
    let base = match (c.train_set, c.cap) {
        (TrainSet::Mixed, Some(cap)) => {
            let (msl, m2020) = (need(&inputs.msl_train, "MSL")?, need(&inputs.m2020_train, "M2020")?);
            compose_mixed(&CompositionSpec {
                cap,
                m2020_proportion: c.m2020_proportion.expect("validated"),
                seed: config.seed,
                source_msl: &msl,
                source_m2020: &m2020,
            })?
        }
        (TrainSet::Mixed, None) => {
            let (msl, m2020) = (need(&inputs.msl_train, "MSL")?, need(&inputs.m2020_train, "M2020")?);
            DatasetManifest::concat("mixed", &[&msl, &m2020])
        }
        (TrainSet::Msl, _) => need(&inputs.msl_train, "MSL")?,
        (TrainSet::M2020, _) => need(&inputs.m2020_train, "M2020")?,
    };
    if c.label_fraction >= 1.0 {
        return Ok(base);
    }
    let parts: Vec<DatasetManifest> = [Domain::Msl, Domain::M2020]
        .into_iter()
        .filter(|&d| base.count_domain(d) > 0)
        .map(|d| single_domain(&base, d))
        .collect();
    Ok(sample_label_fraction(&LabelFractionSpec {
        fraction: c.label_fraction,
        seed: config.seed,
        sources: parts.iter().collect(),
    })?)
}

fn cell_dir(out: &Path, digest: &str) -> PathBuf {
    out.join("cells").join(digest)
}

fn execute<T: Scalar>(cell: &Cell, inputs: &Inputs, out: &Path, save_checkpoints: bool) -> Result<CellReport, ExperimentError> {
    let start = Instant::now();
    let cfg = &cell.config;
    let taxonomy = make_taxonomy(cfg.data.taxonomy);
    let dir = cell_dir(out, &cell.digest);
    fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;

    let manifest = compose_train_set(cfg, inputs)?;
    manifest.write(&dir.join("train_manifest.tsv"))?;
    let mut train_domains = BTreeMap::new();
    let mut train_class_pixels = BTreeMap::new();
    for domain in [Domain::Msl, Domain::M2020] {
        let n = manifest.count_domain(domain);
        if n > 0 {
            train_domains.insert(domain.to_string(), n);
            let hist = class_pixel_histogram(&single_domain(&manifest, domain), &taxonomy);
            train_class_pixels.insert(domain.to_string(), hist.counts);
        }
    }

    let train = Dataset::<T>::from_manifest(manifest.clone(), taxonomy.clone(), cfg.train.preprocess.clone(), cfg.train.cache_samples)?;
    let spec = cfg.backbone.spec(&inputs.root);
    let model = build_model_with_seed::<T>(&spec, &taxonomy, cfg.seed)?;
    let trainable_parameters = count_values(&model, true);
    let mut train_cfg = cfg.train.clone();
    if save_checkpoints {
        train_cfg.checkpoint_dir = Some(dir.clone());
    }
    let outcome = finetune(model, &spec, &train, &[], &train_cfg)?;
    let final_train_loss = outcome.final_train_loss();
    let mut model = outcome.model;

    let mut eval = BTreeMap::new();
    for name in cfg.test_sets() {
        let m = inputs
            .tests
            .get(&name)
            .ok_or_else(|| ExperimentError::MissingInput(format!("test set `{name}`")))?;
        let test = Dataset::<T>::from_manifest(m.clone(), taxonomy.clone(), cfg.train.preprocess.clone(), false)?;
        eval.insert(name, evaluate(&mut model, &test, cfg.train.eval_batch_size)?);
    }

    let report = CellReport {
        digest: cell.digest.clone(),
        setting: cell.setting.clone(),
        config: cfg.clone(),
        train_images: manifest.len(),
        train_domains,
        train_manifest_hash: manifest.content_hash().to_string(),
        train_class_pixels,
        trainable_parameters,
        history: outcome.history,
        final_train_loss,
        eval,
        classes: taxonomy.classes().to_vec(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn existing_report(out: &Path, digest: &str) -> Option<CellReport> {
    let r: CellReport = read_json(&cell_dir(out, digest).join("report.json")).ok()?;
    (r.digest == digest).then_some(r)
}

fn summary_line(record: &CellRecord, classes: &[String]) -> SummaryLine {
    let metrics = record
        .report
        .as_ref()
        .map(|r| {
            r.eval
                .iter()
                .map(|(test, rep)| {
                    let values = metric_names(classes)
                        .into_iter()
                        .map(|m| {
                            let v = metric_value(rep, &m, classes);
                            (m, v)
                        })
                        .collect();
                    (test.clone(), values)
                })
                .collect()
        })
        .unwrap_or_default();
    SummaryLine {
        digest: record.digest.clone(),
        setting: record.setting.clone(),
        status: record.status,
        error: record.error.clone(),
        report: record.report.as_ref().map(|_| format!("cells/{}/report.json", record.digest)),
        metrics,
    }
}

fn failed_cells(records: &[CellRecord]) -> Vec<FailedCell> {
    records
        .iter()
        .filter(|r| r.status == CellStatus::Failed)
        .map(|r| FailedCell {
            digest: r.digest.clone(),
            setting: r.setting.clone(),
            error: r.error.clone().unwrap_or_default(),
        })
        .collect()
}

fn grid_test_sets(grid: &ExperimentGrid) -> Vec<String> {
    let mut names: Vec<String> = grid.cells.iter().flat_map(|c| c.config.test_sets()).collect();
    names.sort();
    names.dedup();
    names
}

/// Runs every cell not already completed under `grid.output_dir`.
///
/// Cell failures are recorded, not propagated; only problems with the
/// inputs shared by all cells abort the sweep.
pub fn run_grid<T: Scalar>(grid: &ExperimentGrid, opts: &RunOptions) -> Result<SweepResult, ExperimentError> {
    let out = &grid.output_dir;
    fs::create_dir_all(out.join("cells")).map_err(|e| ExperimentError::io(out, e))?;
    let classes = make_taxonomy(grid.taxonomy).classes().to_vec();
    let meta = SweepMeta {
        name: grid.name.clone(),
        axes: grid.axes.clone(),
        classes: classes.clone(),
        recall_class: grid.recall_class.clone(),
        test_sets: grid_test_sets(grid),
        reference_lines: grid.reference_lines.clone(),
    };
    write_json(&out.join("sweep.json"), &meta)?;
    write_json(&out.join("grid.json"), &grid.cells)?;
    let inputs = prepare_inputs(grid, opts)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
    let total = grid.cells.len();
    let records: Vec<CellRecord> = pool.install(|| {
        grid.cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                if let Some(report) = existing_report(out, &cell.digest) {
                    log::info!("cell {}/{total} {} already complete", i + 1, &cell.digest[..12]);
                    return CellRecord {
                        digest: cell.digest.clone(),
                        setting: cell.setting.clone(),
                        status: CellStatus::Resumed,
                        error: None,
                        report: Some(report),
                    };
                }
                log::info!("cell {}/{total} {} starting", i + 1, &cell.digest[..12]);
                match execute::<T>(cell, &inputs, out, grid.save_checkpoints) {
                    Ok(report) => CellRecord {
                        digest: cell.digest.clone(),
                        setting: cell.setting.clone(),
                        status: CellStatus::Completed,
                        error: None,
                        report: Some(report),
                    },
                    Err(e) => {
                        log::error!("cell {} failed: {e}", &cell.digest[..12]);
                        CellRecord {
                            digest: cell.digest.clone(),
                            setting: cell.setting.clone(),
                            status: CellStatus::Failed,
                            error: Some(e.to_string()),
                            report: None,
                        }
                    }
                }
            })
            .collect()
    });

    let mut summary = String::new();
    for r in &records {
        summary.push_str(&serde_json::to_string(&summary_line(r, &classes)).expect("summary serializes"));
        summary.push('\n');
    }
    let path = out.join("summary.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| ExperimentError::io(&path, e))?;
    f.write_all(summary.as_bytes()).map_err(|e| ExperimentError::io(&path, e))?;

    let aggregates = aggregate(&records, &classes);
    let failed = failed_cells(&records);
    write_json(
        &out.join("aggregates.json"),
        &AggregateFile {
            name: grid.name.clone(),
            failed_cells: failed.clone(),
            aggregates: aggregates.clone(),
        },
    )?;
    Ok(SweepResult {
        name: grid.name.clone(),
        output_dir: out.clone(),
        axes: grid.axes.clone(),
        classes,
        recall_class: grid.recall_class.clone(),
        test_sets: meta.test_sets,
        reference_lines: grid.reference_lines.clone(),
        records,
        aggregates,
        failed,
    })
}

/// [`run_grid`] at the grid's configured precision.
pub fn run(grid: &ExperimentGrid, opts: &RunOptions) -> Result<SweepResult, ExperimentError> {
    match grid.dtype {
        Dtype::F32 => run_grid::<f32>(grid, opts),
        Dtype::F64 => run_grid::<f64>(grid, opts),
    }
}

/// Rebuilds a result from the files under `dir`, recomputing aggregates
/// from the per-cell reports.
pub fn load_result(dir: &Path) -> Result<SweepResult, ExperimentError> {
    let meta: SweepMeta = read_json(&dir.join("sweep.json"))?;
    let path = dir.join("summary.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let s: SummaryLine = serde_json::from_str(line).map_err(|source| ExperimentError::Json {
            path: path.clone(),
            source,
        })?;
        let report = match &s.report {
            Some(rel) => Some(read_json::<CellReport>(&dir.join(rel))?),
            None => None,
        };
        records.push(CellRecord {
            digest: s.digest,
            setting: s.setting,
            status: s.status,
            error: s.error,
            report,
        });
    }
    let aggregates = aggregate(&records, &meta.classes);
    Ok(SweepResult {
        name: meta.name,
        output_dir: dir.to_path_buf(),
        axes: meta.axes,
        classes: meta.classes,
        recall_class: meta.recall_class,
        test_sets: meta.test_sets,
        reference_lines: meta.reference_lines,
        failed: failed_cells(&records),
        records,
        aggregates,
    })
}

/// The aggregates exactly as written by the run.
pub fn read_emitted_aggregates(dir: &Path) -> Result<Vec<Aggregate>, ExperimentError> {
    Ok(read_json::<AggregateFile>(&dir.join("aggregates.json"))?.aggregates)
}
