//! The `dproto` command line: `gen-data`, `train`, `explain` and `eval`.
//!
//! Exit status is 0 on success, 2 for usage errors, 3 for data errors and
//! 4 when training diverges. Internal parallelism is set by `--threads`
//! (or `DPROTO_THREADS`) and defaults to one thread. Data generation,
//! batched inference, MDM scales and per-image evaluation run in parallel;
//! results do not depend on the thread count.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, load_manifest, pnm, Manifest, Split};
use crate::error::{Error, Result};
use crate::mdm;
use crate::model::Model;
use crate::saliency_eval::{self, sweep_csv, METHODS};
use crate::trainer::{self, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "dproto", version, about = "Prototype classifier with multiple-dynamic-mask explanations")]
pub struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = "DPROTO_THREADS", default_value_t = 1,
          value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes benchmark.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Explain one prediction with MDM saliency maps.
    Explain(ExplainArgs),
    /// Score saliency maps against ground-truth masks.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=6))]
    pub classes: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub per_class: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(8..))]
    pub size: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Distractor shapes per image.
    #[arg(long)]
    pub clutter: Option<usize>,
    /// JSON run configuration; its `dataset` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (or its manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Root seed for initialization, shuffling and pushes.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PPM or PGM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub top_percent: Option<f64>,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Seed of the random-CAM baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn manifest_at(path: &Path) -> Result<Manifest> {
    if path.is_dir() {
        load_manifest(&path.join("manifest.json"))
    } else {
        load_manifest(path)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = load_config(args.config.as_deref())?.dataset;
    if let Some(c) = args.classes {
        spec.classes = c as usize;
    }
    if let Some(n) = args.per_class {
        spec.per_class = n as usize;
    }
    if let Some(s) = args.size {
        spec.image_size = s as usize;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(c) = args.clutter {
        spec.clutter = c;
    }
    spec.validate()?;
    let occupied = std::fs::read_dir(&args.out).map_or(false, |mut d| d.next().is_some());
    if occupied {
        if !args.force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
        for sub in ["images", "masks"] {
            let d = args.out.join(sub);
            if d.exists() {
                std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    let start = Instant::now();
    let manifest = dataset::generate(&spec, &args.out)?;
    println!(
        "wrote {} images ({} classes, {}x{}) to {} in {:.1}s",
        manifest.entries.len(),
        manifest.classes.len(),
        spec.image_size,
        spec.image_size,
        args.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct PushSummary {
    epoch: usize,
    accuracy_before: f64,
    accuracy_after_push: f64,
    accuracy_after_refit: f64,
}

#[derive(Serialize)]
struct TrainMetrics {
    epochs: usize,
    seed: u64,
    final_loss: Option<f64>,
    final_train_accuracy: Option<f64>,
    final_test_accuracy: Option<f64>,
    pushes: Vec<PushSummary>,
}

fn train_metrics(report: &TrainReport, seed: u64) -> TrainMetrics {
    let last = report.epochs.last();
    TrainMetrics {
        epochs: report.epochs.len(),
        seed,
        final_loss: last.map(|e| e.loss.total),
        final_train_accuracy: last.map(|e| e.train_accuracy),
        final_test_accuracy: report.final_test_accuracy(),
        pushes: report
            .pushes
            .iter()
            .map(|p| PushSummary {
                epoch: p.epoch,
                accuracy_before: p.accuracy_before,
                accuracy_after_push: p.accuracy_after_push,
                accuracy_after_refit: p.accuracy_after_refit,
            })
            .collect(),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.trainer.seed = s;
    }
    cfg.validate()?;
    let manifest = manifest_at(&args.data)?;
    let train_set = manifest.load_split(Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    let test_set = manifest.load_split(Split::Test)?;
    let test = (!test_set.is_empty()).then_some(&test_set);
    let mut model = Model::new(&cfg.backbone, &cfg.protolayer, manifest.classes.clone(), cfg.trainer.seed)?;
    if model.input_shape() != manifest.image_size {
        return Err(Error::Data(format!(
            "dataset images are {:?} but the backbone expects {:?}",
            manifest.image_size,
            model.input_shape()
        )));
    }
    println!(
        "training on {} images ({} test), {} epochs, seed {}",
        train_set.len(),
        test_set.len(),
        cfg.trainer.epochs,
        cfg.trainer.seed
    );
    let start = Instant::now();
    let report = trainer::train(&mut model, &train_set, test, &cfg.trainer)?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  ce {:.4}  train acc {:.4}{}{}",
            e.epoch,
            e.loss.total,
            e.loss.cross_entropy,
            e.train_accuracy,
            e.test_accuracy.map_or(String::new(), |a| format!("  test acc {a:.4}")),
            if e.pushed { "  [push]" } else { "" }
        );
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    create_dir(&args.out)?;
    let run_config = serde_json::to_value(&cfg)?;
    checkpoint::save(&model, &args.out.join("model.ckpt"), Some(&run_config))?;
    report.write_csv(&args.out.join("train_log.csv"))?;
    write_json(&args.out.join("metrics.json"), &train_metrics(&report, cfg.trainer.seed))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

/// Configuration for inference commands: an explicit file wins, then the
/// one stored in the checkpoint, then the defaults.
fn inference_config(explicit: Option<&Path>, stored: Option<&serde_json::Value>) -> Result<RunConfig> {
    match (explicit, stored) {
        (Some(p), _) => RunConfig::load(p),
        (None, Some(v)) => {
            serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))
        }
        (None, None) => Ok(RunConfig::default()),
    }
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let cfg = inference_config(args.config.as_deref(), ckpt.run_config.as_ref())?;
    cfg.mdm.validate()?;
    let model = ckpt.model;
    let image = pnm::read(&args.image)?;
    let expected = model.input_shape();
    if image.shape() != expected {
        return Err(Error::Data(format!(
            "{} is {:?} (H, W, C) but the model expects {:?}",
            args.image.display(),
            image.shape(),
            expected
        )));
    }
    let start = Instant::now();
    let bundle = mdm::explain(&model, &image, &cfg.mdm)?;
    if bundle.prototype.is_none() {
        eprintln!(
            "warning: prototype {} was never pushed; writing the input explanation only",
            bundle.node.prototype
        );
    }
    bundle.save(&args.out, &model.class_names)?;
    println!(
        "class {} ({}), prototype {}, explained in {:.1}s -> {}",
        bundle.node.predicted_class,
        model.class_names[bundle.node.predicted_class],
        bundle.node.prototype,
        start.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let mut cfg = inference_config(args.config.as_deref(), ckpt.run_config.as_ref())?;
    if let Some(t) = args.top_percent {
        cfg.eval.top_percent = t;
    }
    if args.max_images.is_some() {
        cfg.eval.max_images = args.max_images;
    }
    cfg.eval.validate()?;
    cfg.mdm.validate()?;
    let model = ckpt.model;
    let manifest = manifest_at(&args.data)?;
    let test = manifest.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    let start = Instant::now();
    let report = saliency_eval::evaluate_dataset(&model, &test, &cfg.mdm, &cfg.eval, args.seed)?;
    let seconds = start.elapsed().as_secs_f64();

    create_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &report.metrics_json())?;
    for (i, m) in METHODS.iter().enumerate() {
        let suffix = if i == 0 { String::new() } else { format!("_{m}") };
        write_text(&args.out.join(format!("curves{suffix}.csv")), &report.curves_csv(i))?;
        write_text(&args.out.join(format!("sweep{suffix}.csv")), &sweep_csv(&report.sweep(i)?))?;
    }
    write_text(&args.out.join("per_image.csv"), &report.per_image_csv())?;
    println!("accuracy {:.4} on {} test images", report.accuracy, test.len());
    for (i, m) in METHODS.iter().enumerate() {
        let s = report.summary(i);
        println!(
            "{m:>10}: iou {:.4}  dice {:.4}  AD {:.2}  AI {:.2}  deletion {:.4}  insertion {:.4}",
            s.iou, s.dice, s.ad, s.ai, s.deletion_auc, s.insertion_auc
        );
    }
    println!(
        "evaluated {} images in {:.1}s -> {}",
        report.images.len(),
        seconds,
        args.out.display()
    );
    Ok(())
}
