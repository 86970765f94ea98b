//! `gdgt`: synthesize data, train, evaluate, predict and self-check.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or verification failure.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use gdgt::checkpoint;
use gdgt::data::{
    prepare_samples, read_image, read_manifest, read_scene, resize_to_input, synth_scene, write_image, write_manifest,
    write_mask, ManifestEntry, Scene, DEFAULT_OVERLAP, DEFAULT_TILE, PALETTE, SYNTH_MIN_SIZE,
};
use gdgt::metrics::{report, report_header};
use gdgt::model::{Gdgt, LabelMask};
use gdgt::tensor::Tensor;
use gdgt::training::{ablation_sweep, evaluate, log_header, predict_image, train};
use gdgt::verify;

use config::{CliConfigFile, DataPlan};

const DEFAULT_CHECKPOINT: &str = "gdgt.ckpt";
const DEFAULT_LOG: &str = "train.log";

#[derive(Parser, Debug)]
#[command(name = "gdgt", version, about = "Sea-ice segmentation with wavelet-guided decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded synthetic scenes, their masks and a manifest
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint
    Train(TrainArgs),
    /// Score a checkpoint, or train and score the four ablation configurations
    Eval(EvalArgs),
    /// Predict a palette mask for an image of any size
    Predict(PredictArgs),
    /// Run the fast property suites
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Seed of the first scene; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Scene side in pixels (at least 64)
    #[arg(long, default_value_t = 64, value_parser = parse_synth_size)]
    size: usize,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

/// Training flags shared by `train` and `eval --ablation-sweep`.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// TOML run configuration [default: none, library defaults apply]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of epochs [default: config, else 12]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: config, else 6e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [default: config, else 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialisation and shuffling [default: config, else 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    /// Loads the config file (relative paths resolved against its directory)
    /// and applies the flags on top.
    fn resolve(&self) -> Result<CliConfigFile> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut cfg = CliConfigFile::load(path)?;
                cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
                cfg
            }
            None => CliConfigFile::default(),
        };
        let t = &mut cfg.train;
        t.epochs = self.epochs.or(t.epochs);
        t.lr = self.lr.or(t.lr);
        t.batch_size = self.batch_size.or(t.batch_size);
        t.seed = self.seed.or(t.seed);
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    train: TrainOverrides,
    /// Where to save the best checkpoint [default: config, else gdgt.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch log file [default: config, else train.log]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score (required unless --ablation-sweep)
    #[arg(long, required_unless_present = "ablation_sweep")]
    checkpoint: Option<PathBuf>,
    /// Evaluation manifest [default: config val_manifest, else synthetic validation scenes]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train and score all four ablation configurations from one seed
    #[arg(long, conflicts_with = "checkpoint")]
    ablation_sweep: bool,
    /// Write the metrics as key=value lines (one [tag] section per row in sweep mode) [default: none]
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// RGB input image
    #[arg(long)]
    image: PathBuf,
    /// Output palette mask (PNG)
    #[arg(long)]
    out: PathBuf,
    /// Tile side for images larger than one tile
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
    /// Overlap between neighbouring tiles
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: usize,
    /// Also write the image and the coloured mask side by side [default: none]
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only the named suite (repeatable) [default: all suites]
    #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(verify::SUITES))]
    suites: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns `Ok(false)` for a completed run whose checks failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth(a) => cmd_synth(&a).map(|_| true),
        Command::Train(a) => cmd_train(&a).map(|_| true),
        Command::Eval(a) => cmd_eval(&a).map(|_| true),
        Command::Predict(a) => cmd_predict(&a).map(|_| true),
        Command::Verify(a) => Ok(cmd_verify(&a)),
    }
}

fn parse_synth_size(s: &str) -> std::result::Result<usize, String> {
    let size: usize = s.parse().map_err(|e| format!("{e}"))?;
    if size < SYNTH_MIN_SIZE {
        return Err(format!("{size} is below the generator minimum of {SYNTH_MIN_SIZE}"));
    }
    Ok(size)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let scene = synth_scene(a.seed + i as u64, a.size);
        let image = PathBuf::from(format!("scene_{i:05}.png"));
        let mask = PathBuf::from(format!("scene_{i:05}_mask.png"));
        write_image(&a.out.join(&image), &scene.image)?;
        write_mask(&a.out.join(&mask), &scene.mask)?;
        entries.push(ManifestEntry {
            image,
            mask,
            scale: 1.0,
        });
    }
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} scenes and {}", a.count, manifest.display());
    Ok(())
}

fn load_manifest_scenes(path: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for e in read_manifest(path)? {
        let mut scene = read_scene(&e.image, &e.mask)?;
        scene.meta.scale = e.scale;
        scenes.push(scene);
    }
    ensure!(!scenes.is_empty(), "manifest {} lists no scenes", path.display());
    Ok(scenes)
}

/// Synthetic scenes are generated at the input size, or generated larger and
/// resized down.
fn synthetic(count: usize, seed: u64, size: usize, side: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| Ok(resize_to_input(&synth_scene(seed + i as u64, size), side)?))
        .collect()
}

fn training_set(plan: &DataPlan, side: usize) -> Result<Vec<Scene>> {
    match &plan.train_manifest {
        Some(path) => {
            let scenes = load_manifest_scenes(path)?;
            Ok(prepare_samples(
                &scenes,
                &plan.ratios,
                plan.tile_size,
                plan.overlap,
                side,
            )?)
        }
        None => synthetic(plan.synth_count, plan.synth_seed, plan.synth_size, side),
    }
}

/// Manifest scenes are tiled at scale 1 and resized to the input. With a
/// training manifest but no validation set the training set is scored.
fn validation_set(plan: &DataPlan, manifest: Option<&Path>, side: usize) -> Result<Option<Vec<Scene>>> {
    if let Some(path) = manifest.or(plan.val_manifest.as_deref()) {
        let scenes = load_manifest_scenes(path)?;
        return Ok(Some(prepare_samples(
            &scenes,
            &[1.0],
            plan.tile_size,
            plan.overlap,
            side,
        )?));
    }
    if plan.train_manifest.is_some() || plan.val_count == 0 {
        return Ok(None);
    }
    synthetic(plan.val_count, plan.val_seed, plan.synth_size, side).map(Some)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let model_config = cfg.model_config();
    model_config.validate()?;
    let train_config = cfg.train_config();
    train_config.validate()?;
    let checkpoint_path = a
        .checkpoint
        .clone()
        .or(cfg.output.checkpoint.clone())
        .unwrap_or_else(|| DEFAULT_CHECKPOINT.into());
    let log_path = a
        .log
        .clone()
        .or(cfg.output.log.clone())
        .unwrap_or_else(|| DEFAULT_LOG.into());

    let plan = cfg.data_plan();
    let side = model_config.input_size;
    let train_set = training_set(&plan, side)?;
    let val = validation_set(&plan, None, side)?;

    let tag = model_config.ablation.tag();
    let mut log =
        BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create log {}", log_path.display()))?);
    let header = log_header(tag);
    writeln!(log, "{header}")?;
    log.flush()?;
    println!("{header}");

    let mut model = Gdgt::new(model_config, train_config.seed)?;
    let mut write_err = None;
    let outcome = train(&mut model, &train_set, val.as_deref(), &train_config, &mut |r| {
        let line = r.log_line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })
    .with_context(|| format!("training {tag} failed"))?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("cannot write log {}", log_path.display()));
    }

    checkpoint::save(&checkpoint_path, &outcome.best)?;
    println!(
        "best epoch {} val mIoU {:.4}, saved {}",
        outcome.best_epoch,
        outcome.best_metrics.miou,
        checkpoint_path.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let plan = cfg.data_plan();
    let mut dump = String::new();
    if a.ablation_sweep {
        let model_config = cfg.model_config();
        model_config.validate()?;
        let train_config = cfg.train_config();
        let side = model_config.input_size;
        let train_set = training_set(&plan, side)?;
        let val = validation_set(&plan, a.data.as_deref(), side)?;
        let rows = ablation_sweep(
            &model_config,
            &train_set,
            val.as_deref(),
            &train_config,
            &mut |ab, r| {
                eprintln!("{}\t{}", ab.tag(), r.log_line());
            },
        )?;
        println!("{}", report_header(model_config.num_categories));
        for row in &rows {
            let tag = row.ablation.tag();
            println!("{}", report(&row.metrics, tag));
            dump.push_str(&format!("[{tag}]\n{}", row.metrics.dump()));
        }
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires --checkpoint");
        let model = checkpoint::load(path)?;
        let config = model.config();
        let side = config.input_size;
        let Some(scenes) = validation_set(&plan, a.data.as_deref(), side)? else {
            bail!("no evaluation data: pass --data or set val_manifest or val_count in the config");
        };
        let (_, metrics) = evaluate(&model, &scenes, cfg.train_config().batch_size)?;
        println!("{}", report_header(config.num_categories));
        println!("{}", report(&metrics, config.ablation.tag()));
        dump = metrics.dump();
    }
    if let Some(out) = &a.metrics_out {
        fs::write(out, dump).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

/// The image and its coloured mask side by side.
fn overlay(image: &Tensor, mask: &LabelMask) -> Result<Tensor> {
    let (h, w) = (mask.height(), mask.width());
    let src = image.data();
    let mut data = vec![0.0; 3 * h * 2 * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let row = c * h * 2 * w + y * 2 * w;
                data[row + x] = src[c * h * w + y * w + x];
                data[row + w + x] = PALETTE[mask.get(y, x) as usize][c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, 2 * w], data)?)
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let mask = predict_image(&model, &image, a.tile, a.overlap)?;
    write_mask(&a.out, &mask)?;
    if let Some(path) = &a.overlay {
        write_image(path, &overlay(&image, &mask)?)?;
    }
    println!("wrote {}×{} mask {}", mask.height(), mask.width(), a.out.display());
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> bool {
    let names: Vec<&str> = if a.suites.is_empty() {
        verify::SUITES.to_vec()
    } else {
        a.suites.iter().map(String::as_str).collect()
    };
    let mut ok = true;
    for name in names {
        let outcome = verify::run_suite(name).expect("suite names validated by clap");
        println!("{}", outcome.line());
        ok &= outcome.passed;
    }
    ok
}
