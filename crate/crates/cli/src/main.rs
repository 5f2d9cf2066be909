use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mixseg::composition::{compose_mixed, sample_label_fraction, CompositionSpec, LabelFractionSpec};
use mixseg::experiment::{
    emit_table, load_result, plot_sweep, run, ExperimentConfig, ExperimentError, ExperimentGrid, PlotKind, PlotOptions,
    ReferenceLine, RunOptions, Selection, TableFormat,
};
use mixseg::ingest::{scan_dataset, DatasetManifest, ScanOptions};
use mixseg::synthetic::{write_dataset, SyntheticKind, SyntheticSpec};
use mixseg::taxonomy::{make_taxonomy, Domain, Split, TaxonomyVariant};
use mixseg::train::{evaluate, Checkpoint, Dataset, TrainError};
use mixseg::Scalar;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mixseg", version, about = "Mixed-domain terrain segmentation experiments")]
struct Cli {
    /// Experiment config file (train, sweep).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the base seed; replaces a swept seed axis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cells trained in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output location; a directory for train/sweep/plot/synth, a file otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base directory for relative data paths in configs.
    #[arg(long, global = true, env = "MIXSEG_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pair images with masks under a dataset directory and write a manifest.
    Ingest(IngestArgs),
    /// Draw a capped mixed-domain training set.
    Compose(ComposeArgs),
    /// Draw a stratified label fraction from one or two pools.
    Subsample(SubsampleArgs),
    /// Train a single configuration.
    Train,
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Run (or only validate) an experiment grid.
    Sweep(SweepArgs),
    /// Draw figures from a finished sweep.
    Plot(PlotArgs),
    /// Print a results table for a finished sweep.
    Table(TableArgs),
    /// Write a generated dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    root: PathBuf,
    #[arg(long)]
    domain: Domain,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value = "images")]
    image_dir: PathBuf,
    #[arg(long, default_value = "labels")]
    mask_dir: PathBuf,
    #[arg(long, default_value = "four_class")]
    taxonomy: TaxonomyVariant,
    /// Write refs relative to this directory instead of the manifest's.
    #[arg(long)]
    ref_base: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long)]
    msl: PathBuf,
    #[arg(long)]
    m2020: PathBuf,
    #[arg(long)]
    cap: usize,
    #[arg(long)]
    proportion: f64,
}

#[derive(Args, Debug)]
struct SubsampleArgs {
    /// Single-domain pools, one or two.
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    #[arg(long)]
    fraction: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Expand and check the grid without running anything.
    #[arg(long)]
    validate: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Sweep output directory.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    kind: PlotKind,
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// `axis=value`, repeatable.
    #[arg(long = "filter")]
    filters: Vec<String>,
    /// `label:metric:value[:test_set]`, repeatable.
    #[arg(long = "reference")]
    references: Vec<String>,
}

#[derive(Args, Debug)]
struct TableArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    #[arg(long = "filter")]
    filters: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "geometric")]
    kind: String,
    /// Minority pixel share for `--kind imbalanced`.
    #[arg(long, default_value_t = 0.01)]
    minority_fraction: f64,
    #[arg(long, default_value_t = 32)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value = "msl")]
    domain: Domain,
}

/// A usage problem detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("CONFIG_ERROR: {0}")]
struct ConfigError(String);

fn config_error(e: anyhow::Error) -> anyhow::Error {
    ConfigError(format!("{e:#}")).into()
}

fn is_config(e: &anyhow::Error) -> bool {
    e.is::<ConfigError>()
        || e.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_config)
        || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| config_error(anyhow!("--out is required for this command")))
}

fn load_grid(cli: &Cli) -> Result<ExperimentGrid> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| config_error(anyhow!("--config is required for this command")))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if cfg.grid.seed.is_some() {
            cfg.grid.seed = Some(vec![seed]);
        }
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg.grid()?)
}

fn run_options(cli: &Cli) -> RunOptions {
    RunOptions {
        workers: cli.workers,
        data_root: cli.data_root.clone(),
    }
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let out = require_out(cli)?;
    let ref_base = a.ref_base.clone().or_else(|| out.parent().map(Path::to_path_buf));
    let opts = ScanOptions {
        image_dir: a.image_dir.clone(),
        mask_dir: a.mask_dir.clone(),
        taxonomy_variant: a.taxonomy,
        ref_base,
        ..ScanOptions::default()
    };
    let o = scan_dataset(&a.root, a.domain, a.split, &opts)?;
    for m in &o.missing_masks {
        log::warn!("MISSING_MASK {m}");
    }
    for m in &o.missing_images {
        log::warn!("MISSING_IMAGE {m}");
    }
    o.manifest.write(out)?;
    println!(
        "{} entries ({} without mask, {} without image) -> {}",
        o.manifest.len(),
        o.missing_masks.len(),
        o.missing_images.len(),
        out.display()
    );
    Ok(())
}

fn cmd_compose(cli: &Cli, a: &ComposeArgs) -> Result<()> {
    let out = require_out(cli)?;
    let msl = DatasetManifest::read(&a.msl)?;
    let m2020 = DatasetManifest::read(&a.m2020)?;
    let m = compose_mixed(&CompositionSpec {
        cap: a.cap,
        m2020_proportion: a.proportion,
        seed: cli.seed.unwrap_or(0),
        source_msl: &msl,
        source_m2020: &m2020,
    })?;
    m.write(out)?;
    println!(
        "{} images ({} M2020, {} MSL), hash {} -> {}",
        m.len(),
        m.count_domain(Domain::M2020),
        m.count_domain(Domain::Msl),
        m.content_hash(),
        out.display()
    );
    Ok(())
}

fn cmd_subsample(cli: &Cli, a: &SubsampleArgs) -> Result<()> {
    let out = require_out(cli)?;
    let pools = a
        .sources
        .iter()
        .map(|p| DatasetManifest::read(p).with_context(|| p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let m = sample_label_fraction(&LabelFractionSpec {
        fraction: a.fraction,
        seed: cli.seed.unwrap_or(0),
        sources: pools.iter().collect(),
    })?;
    m.write(out)?;
    println!("{} images, hash {} -> {}", m.len(), m.content_hash(), out.display());
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let mut grid = load_grid(cli)?;
    if grid.cells.len() != 1 {
        return Err(config_error(anyhow!(
            "train runs one configuration but this config expands to {} cells; use `sweep`",
            grid.cells.len()
        )));
    }
    grid.save_checkpoints = true;
    let res = run(&grid, &run_options(cli))?;
    if let Some(f) = res.failed.first() {
        bail!("{}", f.error);
    }
    let rep = res.reports().next().expect("one completed cell");
    println!("cell {}", rep.digest);
    println!("checkpoint {}", grid.output_dir.join("cells").join(&rep.digest).join("last.ckpt").display());
    if let Some(l) = rep.final_train_loss {
        println!("final train loss {l:.6}");
    }
    for (name, e) in &rep.eval {
        println!("{name}: accuracy {:.4}  f1_macro {:.4}  miou {:.4}", e.accuracy, e.f1_macro, e.miou);
    }
    Ok(())
}

fn eval_with<T: Scalar>(ck: &Checkpoint, a: &EvalArgs) -> Result<mixseg::metrics::EvalReport> {
    let h = &ck.header;
    let mut model = ck.restore_model::<T>()?;
    let manifest = DatasetManifest::read(&a.test)?;
    let test = Dataset::<T>::from_manifest(manifest, make_taxonomy(h.config.taxonomy), h.config.preprocess.clone(), false)?;
    Ok(evaluate(&mut model, &test, a.batch_size)?)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = match ck.header.dtype.as_str() {
        "f64" => eval_with::<f64>(&ck, a)?,
        _ => eval_with::<f32>(&ck, a)?,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &cli.out {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string())?,
        None => println!("{text}"),
    }
    eprintln!("accuracy {:.4}  f1_macro {:.4}  miou {:.4}", report.accuracy, report.f1_macro, report.miou);
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<u8> {
    let grid = load_grid(cli)?;
    if a.validate {
        println!("{}: {} cells over axes [{}]", grid.name, grid.cells.len(), grid.axes.join(", "));
        return Ok(0);
    }
    let res = run(&grid, &run_options(cli))?;
    let done = res.records.len() - res.failed.len();
    println!("{done}/{} cells completed; results in {}", res.records.len(), grid.output_dir.display());
    if !res.failed.is_empty() {
        eprintln!("FAILED_CELLS:");
        for f in &res.failed {
            eprintln!("  {} {}", f.digest, f.error);
        }
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn parse_reference(s: &str) -> Result<ReferenceLine> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(config_error(anyhow!("reference `{s}` is not label:metric:value[:test_set]")));
    }
    Ok(ReferenceLine {
        label: parts[0].into(),
        metric: parts[1].into(),
        value: parts[2].parse().map_err(|e| config_error(anyhow!("reference value `{}`: {e}", parts[2])))?,
        test_set: parts.get(3).map(|t| t.to_string()),
    })
}

fn cmd_plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let res = load_result(&a.results)?;
    let mut opts = PlotOptions {
        selection: Selection::parse(&a.filters)?,
        references: a.references.iter().map(|r| parse_reference(r)).collect::<Result<_>>()?,
        ..PlotOptions::default()
    };
    if !a.metrics.is_empty() {
        opts.metrics = a.metrics.clone();
    }
    let dir = cli.out.clone().unwrap_or_else(|| a.results.join("plots"));
    for p in plot_sweep(&res, a.kind, &dir, &opts)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_table(cli: &Cli, a: &TableArgs) -> Result<()> {
    let res = load_result(&a.results)?;
    let text = emit_table(&res, a.format, &Selection::parse(&a.filters)?)?;
    match &cli.out {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string())?,
        None => print!("{text}"),
    }
    if !res.failed.is_empty() {
        eprintln!("{} failed cells are not included", res.failed.len());
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = require_out(cli)?;
    let kind = match a.kind.as_str() {
        "geometric" => SyntheticKind::Geometric,
        "imbalanced" => SyntheticKind::Imbalanced {
            minority_fraction: a.minority_fraction,
        },
        "unlearnable" => SyntheticKind::Unlearnable,
        other => return Err(config_error(anyhow!("unknown synthetic kind `{other}`"))),
    };
    let mut spec = SyntheticSpec::new(kind, a.images, a.size, cli.seed.unwrap_or(0)).with_split(a.split);
    spec.domain = a.domain;
    let m = write_dataset(out, &spec)?;
    println!("{} images -> {}", m.len(), out.join("manifest.tsv").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(cli, a)?,
        Command::Compose(a) => cmd_compose(cli, a)?,
        Command::Subsample(a) => cmd_subsample(cli, a)?,
        Command::Train => cmd_train(cli)?,
        Command::Eval(a) => cmd_eval(cli, a)?,
        Command::Sweep(a) => return cmd_sweep(cli, a),
        Command::Plot(a) => cmd_plot(cli, a)?,
        Command::Table(a) => cmd_table(cli, a)?,
        Command::Synth(a) => cmd_synth(cli, a)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
