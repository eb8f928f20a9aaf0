//! Command implementations for the `mtl` binary.

mod compare;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mtl_core::combiners::CombinerConfig;
use mtl_core::data::{
    generate_dataset, load_dataset, split, write_dataset, SceneSpec, WriteOptions,
};
use mtl_core::network::{load_checkpoint, save_checkpoint, AggregationMode};
use mtl_core::training::{
    evaluate, train_with, write_metrics_csv, write_timing_csv, EpochMetrics, ExperimentConfig,
};
use mtl_core::Task;

pub use compare::{run_compare, CompareSpec, RunRow};

/// Exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(
    name = "mtl",
    version,
    about = "Multi-stream multi-task training with pluggable loss strategies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic frame-pair dataset.
    Generate(GenerateArgs),
    /// Train one model and write metrics plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sweep strategies, frame counts, task sets and seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub moving_fraction: Option<f64>,
    #[arg(long)]
    pub max_displacement: Option<usize>,
    /// Also write PNG previews.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Strategy name: equal, weighted, gls, fls, uncertainty, dwa.
    #[arg(long)]
    pub combiner: Option<String>,
    /// Comma-separated, e.g. `segmentation,depth`.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<Task>>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// concat or sum.
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Evaluate on the whole dataset instead of the validation split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
}

/// Maps an error to its exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mtl_core::Error>() {
            return if e.is_numeric() {
                exit::NUMERIC
            } else if e.is_data() {
                exit::DATA
            } else {
                exit::USAGE
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::DATA;
        }
    }
    exit::USAGE
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| mtl_core::Error::Data(format!("{}: {e}", path.display())))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| mtl_core::Error::Config(format!("{}: {e}", path.display())))?;
    Ok(value)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| mtl_core::Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| mtl_core::Error::Data(format!("{}: {e}", dir.display())))?;
    Ok(())
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| anyhow!(mtl_core::Error::Config("--out is required".into())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

pub fn scene_spec(a: &GenerateArgs) -> Result<SceneSpec> {
    let mut spec: SceneSpec = match &a.common.config {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = a.common.seed {
        spec.seed = v;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                spec.$field = v;
            }
        )*};
    }
    set!(
        height,
        width,
        min_objects,
        max_objects,
        moving_fraction,
        max_displacement
    );
    if let Some(v) = a.classes {
        spec.num_classes = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let out = require_out(&a.common)?;
    let spec = scene_spec(a)?;
    let ds = generate_dataset(&spec, a.count)?;
    write_dataset(
        &ds,
        out,
        &WriteOptions {
            png: a.png,
            spec: Some(spec.clone()),
        },
    )?;
    if !a.common.quiet {
        let moving: usize = ds.samples.iter().map(|s| s.motion.count(1)).sum();
        println!(
            "wrote {} samples ({}x{}, {} classes) to {}",
            ds.samples.len(),
            spec.height,
            spec.width,
            spec.num_classes,
            out.display()
        );
        println!("motion-positive pixels: {moving}");
    }
    Ok(())
}

fn parse_aggregation(s: &str) -> Result<AggregationMode> {
    match s {
        "concat" => Ok(AggregationMode::Concat),
        "sum" => Ok(AggregationMode::Sum),
        other => bail!(mtl_core::Error::Config(format!(
            "unknown aggregation `{other}`, expected concat or sum"
        ))),
    }
}

pub fn experiment_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = match &a.common.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.common.seed {
        c.seed = v;
    }
    if let Some(v) = &a.common.out {
        c.output = Some(v.clone());
    }
    if let Some(v) = &a.dataset {
        c.dataset = Some(v.clone());
    }
    if let Some(name) = &a.combiner {
        c.combiner = CombinerConfig::from_name(name)?;
    }
    if let Some(v) = &a.tasks {
        c.tasks = v.clone();
    }
    if let Some(v) = a.frames {
        c.num_frames = v;
    }
    if let Some(v) = &a.aggregation {
        c.aggregation = parse_aggregation(v)?;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.optimizer.set_lr(v);
    }
    c.validate()?;
    Ok(c)
}

fn dataset_path(configured: Option<&Path>) -> Result<&Path> {
    configured.ok_or_else(|| {
        anyhow!(mtl_core::Error::Config(
            "no dataset given; pass --dataset or set `dataset` in the config".into()
        ))
    })
}

fn progress_line(m: &EpochMetrics) -> String {
    let mut line = format!("epoch {:>3}  loss {:.4}", m.epoch, m.combined_loss);
    for (t, a) in m.tasks.iter().zip(&m.val_accuracy) {
        line.push_str(&format!("  {} {:.4}", t.short(), a));
    }
    line
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = experiment_config(a)?;
    let out = config
        .output
        .clone()
        .ok_or_else(|| anyhow!(mtl_core::Error::Config("--out is required".into())))?;
    let ds = load_dataset(dataset_path(config.dataset.as_deref())?)?;
    create_dir(&out)?;
    let quiet = a.common.quiet;
    let outcome = train_with(&config, &ds, |m| {
        if !quiet {
            println!("{}", progress_line(m));
        }
    })
    .with_context(|| format!("training with combiner {}", config.combiner))?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
    write_timing_csv(&out.join("timing.csv"), &outcome.metrics)?;
    write_json(&out.join("config.json"), &config)?;
    save_checkpoint(
        &outcome.model,
        &serde_json::to_value(&config)?,
        &out.join("model.ckpt"),
    )?;
    if !quiet {
        println!("wrote metrics and checkpoint to {}", out.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut config: ExperimentConfig = match &a.common.config {
        Some(p) => read_json(p)?,
        None => serde_json::from_value(ckpt.config.clone()).unwrap_or_default(),
    };
    if let Some(v) = a.common.seed {
        config.seed = v;
    }
    if let Some(v) = &a.dataset {
        config.dataset = Some(v.clone());
    }
    config.tasks = ckpt.model.tasks().to_vec();
    config.num_frames = ckpt.model.config().num_frames;
    let ds = load_dataset(dataset_path(config.dataset.as_deref())?)?;
    let samples = if a.all {
        ds.samples.iter().collect::<Vec<_>>()
    } else {
        let refs: Vec<_> = ds.samples.iter().collect();
        split(&refs, config.train_fraction, config.seed)?.1
    };
    let m = evaluate(&ckpt.model, &samples, &config)?;
    let report: serde_json::Map<String, serde_json::Value> = config
        .tasks
        .iter()
        .map(|t| {
            (
                t.name().to_string(),
                serde_json::json!({"loss": m.loss[t], "accuracy": m.accuracy[t]}),
            )
        })
        .collect();
    if !a.common.quiet {
        for t in &config.tasks {
            println!(
                "{:<13} loss {:.6}  accuracy {:.4}",
                t.name(),
                m.loss[t],
                m.accuracy[t]
            );
        }
    }
    if let Some(out) = &a.common.out {
        create_dir(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let path = a
        .common
        .config
        .as_deref()
        .ok_or_else(|| anyhow!(mtl_core::Error::Config("compare needs --config".into())))?;
    let mut spec: CompareSpec = read_json(path)?;
    if let Some(d) = &a.dataset {
        spec.base.dataset = Some(d.clone());
    }
    if let Some(s) = a.common.seed {
        spec.seeds = vec![s];
    }
    spec.validate()?;
    let ds = load_dataset(dataset_path(spec.base.dataset.as_deref())?)?;
    let quiet = a.common.quiet;
    let table = run_compare(&spec, &ds, &out, |row| {
        if !quiet {
            eprintln!("finished {}", row.run_id());
        }
    })?;
    if !quiet {
        print!("{table}");
    }
    Ok(())
}
