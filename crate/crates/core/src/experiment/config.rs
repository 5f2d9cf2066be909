//! Sweep configuration files and their expansion into grid cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::composition::round_half_up;
use crate::losses::{LossConfig, LossKind};
use crate::nn::{BackboneFamily, BackboneSpec, PretrainSource};
use crate::synthetic::{SyntheticKind, SyntheticSpec, CLASSES};
use crate::taxonomy::{make_taxonomy, Domain, Split, TaxonomyVariant};
use crate::train::{canonical_json, TrainConfig};

/// Axis names in expansion order.
pub const AXES: [&str; 7] = [
    "train_set",
    "backbone_family",
    "pretrain_source",
    "loss_kind",
    "m2020_proportion",
    "label_fraction",
    "seed",
];

fn pointers(axis: &str) -> &'static [&'static str] {
    match axis {
        "train_set" => &["/composition/train_set"],
        "backbone_family" => &["/backbone/family"],
        "pretrain_source" => &["/backbone/pretrain_source"],
        "loss_kind" => &["/train/loss/kind"],
        "m2020_proportion" => &["/composition/m2020_proportion"],
        "label_fraction" => &["/composition/label_fraction"],
        "seed" => &["/seed", "/train/seed"],
        _ => &[],
    }
}

/// Axis values of one cell, keyed by axis name.
pub type Setting = BTreeMap<String, Value>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSet {
    Msl,
    M2020,
    #[default]
    Mixed,
}

impl fmt::Display for TrainSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainSet::Msl => "msl",
            TrainSet::M2020 => "m2020",
            TrainSet::Mixed => "mixed",
        })
    }
}

impl FromStr for TrainSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "msl" => Ok(TrainSet::Msl),
            "m2020" => Ok(TrainSet::M2020),
            "mixed" => Ok(TrainSet::Mixed),
            other => Err(format!("unknown train set `{other}`")),
        }
    }
}

fn default_taxonomy() -> TaxonomyVariant {
    TaxonomyVariant::FourClass
}

/// Input data: manifest files, or a generated stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Base for relative paths. Falls back to the run options, then the
    /// working directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_taxonomy")]
    pub taxonomy: TaxonomyVariant,
    #[serde(default)]
    pub msl_train: Option<PathBuf>,
    #[serde(default)]
    pub m2020_train: Option<PathBuf>,
    /// Named test manifests.
    #[serde(default)]
    pub test: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
}

/// Generated MSL/M2020 train and test pools, written under the output
/// directory before the first cell runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    #[serde(default = "defaults::msl_images")]
    pub msl_images: usize,
    #[serde(default = "defaults::m2020_images")]
    pub m2020_images: usize,
    #[serde(default = "defaults::test_images")]
    pub test_images: usize,
    #[serde(default = "defaults::size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn msl_images() -> usize {
        32
    }
    pub fn m2020_images() -> usize {
        8
    }
    pub fn test_images() -> usize {
        8
    }
    pub fn size() -> usize {
        64
    }
    pub fn fraction() -> f64 {
        1.0
    }
    pub fn recall_class() -> Option<String> {
        Some("big_rock".into())
    }
    pub fn output_dir() -> std::path::PathBuf {
        "runs".into()
    }
}

impl SyntheticData {
    /// `(name, spec)` for the two train pools and two test sets.
    pub fn pools(&self) -> Vec<(&'static str, SyntheticSpec)> {
        let make = |n: usize, offset: u64, split: Split, domain: Domain| {
            let mut s = SyntheticSpec::new(self.kind, n, self.size, self.seed.wrapping_add(offset)).with_split(split);
            s.domain = domain;
            s
        };
        vec![
            ("msl_train", make(self.msl_images, 0, Split::Train, Domain::Msl)),
            ("m2020_train", make(self.m2020_images, 1, Split::Train, Domain::M2020)),
            ("msl_test", make(self.test_images, 2, Split::Test, Domain::Msl)),
            ("m2020_test", make(self.test_images, 3, Split::Test, Domain::M2020)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    #[serde(default)]
    pub train_set: TrainSet,
    /// Total image count of a capped mixed set.
    #[serde(default)]
    pub cap: Option<usize>,
    #[serde(default)]
    pub m2020_proportion: Option<f64>,
    #[serde(default = "defaults::fraction")]
    pub label_fraction: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            train_set: TrainSet::Mixed,
            cap: None,
            m2020_proportion: None,
            label_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    pub pretrain_source: PretrainSource,
    /// Holds `{family}_{source}.safetensors` files.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
    /// Explicit files keyed by `"{family}/{source}"`.
    #[serde(default)]
    pub weights: BTreeMap<String, PathBuf>,
}

impl BackboneConfig {
    pub fn weights_path(&self, root: &Path) -> Option<PathBuf> {
        if self.pretrain_source == PretrainSource::Random {
            return None;
        }
        let key = format!("{}/{}", self.family, self.pretrain_source);
        let rel = match (self.weights.get(&key), &self.weights_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(format!("{}_{}.safetensors", self.family, self.pretrain_source)),
            (None, None) => return None,
        };
        Some(root.join(rel))
    }

    pub fn spec(&self, root: &Path) -> BackboneSpec {
        let spec = BackboneSpec::new(self.family, self.pretrain_source);
        match self.weights_path(root) {
            Some(p) => spec.with_weights(p),
            None => spec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Names from `[data.test]`; empty means all of them.
    #[serde(default)]
    pub test_sets: Vec<String>,
    /// Class whose recall gets its own table column.
    #[serde(default = "defaults::recall_class")]
    pub recall_class: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_sets: Vec::new(),
            recall_class: defaults::recall_class(),
        }
    }
}

/// Horizontal line drawn on curve plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLine {
    pub label: String,
    pub metric: String,
    #[serde(default)]
    pub test_set: Option<String>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::output_dir")]
    pub dir: PathBuf,
    /// Keep `last.ckpt` in each cell directory.
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub reference_lines: Vec<ReferenceLine>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: defaults::output_dir(),
            save_checkpoints: false,
            reference_lines: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub train_set: Option<Vec<TrainSet>>,
    #[serde(default)]
    pub backbone_family: Option<Vec<BackboneFamily>>,
    #[serde(default)]
    pub pretrain_source: Option<Vec<PretrainSource>>,
    #[serde(default)]
    pub loss_kind: Option<Vec<LossKind>>,
    #[serde(default)]
    pub m2020_proportion: Option<Vec<f64>>,
    #[serde(default)]
    pub label_fraction: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<Vec<u64>>,
    /// Partial settings; cells matching every listed axis are dropped.
    #[serde(default)]
    pub exclude: Vec<BTreeMap<String, Value>>,
}

impl GridConfig {
    fn axis_values(&self) -> Vec<(&'static str, Vec<Value>)> {
        fn vals<T: Serialize>(v: &Option<Vec<T>>) -> Option<Vec<Value>> {
            v.as_ref()
                .map(|xs| xs.iter().map(|x| serde_json::to_value(x).expect("axis value serializes")).collect())
        }
        let all = [
            vals(&self.train_set),
            vals(&self.backbone_family),
            vals(&self.pretrain_source),
            vals(&self.loss_kind),
            vals(&self.m2020_proportion),
            vals(&self.label_fraction),
            vals(&self.seed),
        ];
        AXES.iter().zip(all).filter_map(|(name, v)| v.map(|v| (*name, v))).collect()
    }
}

/// A sweep file: the base run plus the axes to vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Base seed; the `seed` axis overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: Dtype,
    pub data: DataConfig,
    #[serde(default)]
    pub composition: CompositionConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// `loss`, `taxonomy` and `seed` here are replaced by the dedicated
    /// sections.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

/// Everything that determines one cell's result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub seed: u64,
    pub dtype: Dtype,
    pub data: DataConfig,
    pub composition: CompositionConfig,
    pub backbone: BackboneConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
}

impl CellConfig {
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("cell config serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }

    /// Names of the test sets this cell evaluates on.
    pub fn test_sets(&self) -> Vec<String> {
        if !self.eval.test_sets.is_empty() {
            return self.eval.test_sets.clone();
        }
        if self.data.synthetic.is_some() {
            return vec!["msl".into(), "m2020".into()];
        }
        self.data.test.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        BackboneSpec::new(self.backbone.family, self.backbone.pretrain_source)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;

        let c = &self.composition;
        if !(c.label_fraction > 0.0 && c.label_fraction <= 1.0) {
            return bad(format!("label_fraction {} is outside (0, 1]", c.label_fraction));
        }
        match (c.cap, c.m2020_proportion) {
            (Some(0), _) => return bad("cap must be positive".into()),
            (Some(_), None) => return bad("a capped composition needs m2020_proportion".into()),
            (None, Some(_)) => return bad("m2020_proportion needs a cap".into()),
            (Some(_), Some(p)) if !(0.0..=1.0).contains(&p) => {
                return bad(format!("m2020_proportion {p} is outside [0, 1]"));
            }
            (Some(_), Some(_)) if c.train_set != TrainSet::Mixed => {
                return bad("a capped composition draws from both pools; set train_set = \"mixed\"".into());
            }
            _ => {}
        }
        if c.label_fraction < 1.0 {
            let pools = self.pool_sizes_hint();
            if let Some(total) = pools {
                if round_half_up(c.label_fraction * total as f64) == 0 {
                    return bad(format!("label_fraction {} selects no images", c.label_fraction));
                }
            }
        }

        let d = &self.data;
        let tests = self.test_sets();
        if tests.is_empty() {
            return bad("no test sets configured".into());
        }
        match &d.synthetic {
            Some(s) => {
                if d.msl_train.is_some() || d.m2020_train.is_some() || !d.test.is_empty() {
                    return bad("[data.synthetic] cannot be combined with manifest paths".into());
                }
                if d.taxonomy != TaxonomyVariant::FourClass {
                    return bad(format!("synthetic data has {CLASSES} classes; use taxonomy = \"four_class\""));
                }
                if s.size < 8 || s.test_images == 0 || s.msl_images + s.m2020_images == 0 {
                    return bad("synthetic pools need size >= 8 and nonempty train and test sets".into());
                }
                if let Some(t) = tests.iter().find(|t| *t != "msl" && *t != "m2020") {
                    return bad(format!("synthetic data provides test sets `msl` and `m2020`, not `{t}`"));
                }
            }
            None => {
                let need_msl = c.train_set != TrainSet::M2020;
                let need_m2020 = c.train_set != TrainSet::Msl;
                if need_msl && d.msl_train.is_none() {
                    return bad(format!("train_set `{}` needs data.msl_train", c.train_set));
                }
                if need_m2020 && d.m2020_train.is_none() {
                    return bad(format!("train_set `{}` needs data.m2020_train", c.train_set));
                }
                if let Some(t) = tests.iter().find(|t| !d.test.contains_key(*t)) {
                    return bad(format!("test set `{t}` is not listed under [data.test]"));
                }
            }
        }
        if let Some(name) = &self.eval.recall_class {
            if make_taxonomy(d.taxonomy).index_of(name).is_none() {
                return bad(format!("recall_class `{name}` is not a {} class", d.taxonomy));
            }
        }
        Ok(())
    }

    fn pool_sizes_hint(&self) -> Option<usize> {
        let s = self.data.synthetic.as_ref()?;
        Some(match self.composition.train_set {
            TrainSet::Msl => s.msl_images,
            TrainSet::M2020 => s.m2020_images,
            TrainSet::Mixed => self.composition.cap.unwrap_or(s.msl_images + s.m2020_images),
        })
    }
}

/// One point of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub digest: String,
    pub setting: Setting,
    pub config: CellConfig,
}

/// An expanded sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub name: String,
    pub dtype: Dtype,
    /// Swept axes, in expansion order.
    pub axes: Vec<String>,
    pub cells: Vec<Cell>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub taxonomy: TaxonomyVariant,
    pub recall_class: Option<String>,
    pub reference_lines: Vec<ReferenceLine>,
    pub save_checkpoints: bool,
}

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn base_cell(&self) -> CellConfig {
        let mut train = self.train.clone();
        train.loss = self.loss.clone();
        train.taxonomy = self.data.taxonomy;
        train.seed = self.seed;
        train.checkpoint_dir = None;
        if let Some(s) = &self.data.synthetic {
            train.preprocess = s.pools()[0].1.preprocess();
        }
        CellConfig {
            seed: self.seed,
            dtype: self.dtype,
            data: self.data.clone(),
            composition: self.composition.clone(),
            backbone: self.backbone.clone(),
            eval: self.eval.clone(),
            train,
        }
    }

    /// Cartesian product of the axes, minus exclusions, each cell validated.
    pub fn grid(&self) -> Result<ExperimentGrid, ExperimentError> {
        let axes = self.grid.axis_values();
        for (name, values) in &axes {
            if values.is_empty() {
                return Err(ExperimentError::Config(format!("grid axis `{name}` is empty")));
            }
        }
        for rule in &self.grid.exclude {
            if let Some(k) = rule.keys().find(|k| !AXES.contains(&k.as_str())) {
                return Err(ExperimentError::Config(format!("exclude rule names unknown axis `{k}`")));
            }
        }

        let mut settings: Vec<Setting> = vec![Setting::new()];
        for (name, values) in &axes {
            settings = settings
                .into_iter()
                .flat_map(|s| {
                    values.iter().map(move |v| {
                        let mut s = s.clone();
                        s.insert(name.to_string(), v.clone());
                        s
                    })
                })
                .collect();
        }
        settings.retain(|s| {
            !self
                .grid
                .exclude
                .iter()
                .any(|rule| rule.iter().all(|(k, v)| s.get(k).is_some_and(|x| json_eq(x, v))))
        });
        if settings.is_empty() {
            return Err(ExperimentError::Config("every grid cell is excluded".into()));
        }

        let base = serde_json::to_value(self.base_cell()).expect("cell config serializes");
        let mut cells = Vec::with_capacity(settings.len());
        let mut seen = BTreeSet::new();
        for setting in settings {
            let mut v = base.clone();
            for (axis, value) in &setting {
                for ptr in pointers(axis) {
                    *v.pointer_mut(ptr).expect("axis pointer exists in cell config") = value.clone();
                }
            }
            let config: CellConfig = serde_json::from_value(v).map_err(|e| ExperimentError::Config(e.to_string()))?;
            config.validate().map_err(|e| match e {
                ExperimentError::Config(m) => {
                    ExperimentError::Config(format!("cell {}: {m}", canonical_json(&serde_json::to_value(&setting).unwrap())))
                }
                other => other,
            })?;
            let digest = config.digest();
            if !seen.insert(digest.clone()) {
                return Err(ExperimentError::Config(format!(
                    "duplicate cell {}",
                    canonical_json(&serde_json::to_value(&setting).unwrap())
                )));
            }
            cells.push(Cell { digest, setting, config });
        }

        Ok(ExperimentGrid {
            name: self.name.clone(),
            dtype: self.dtype,
            axes: axes.iter().map(|(n, _)| n.to_string()).collect(),
            cells,
            output_dir: self.output.dir.clone(),
            data: self.data.clone(),
            taxonomy: self.data.taxonomy,
            recall_class: self.eval.recall_class.clone(),
            reference_lines: self.output.reference_lines.clone(),
            save_checkpoints: self.output.save_checkpoints,
        })
    }
}
