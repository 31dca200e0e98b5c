mod ablate;
mod plot;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use infoseg::checkpoint::Checkpoint;
use infoseg::datasets::{
    fingerprint_images, generate_synthetic, load_dataset, load_images, load_split_images, save_dataset, DatasetMeta,
    FitMode, ImageSpec, Split, SplitIds, SyntheticSceneConfig,
};
use infoseg::evaluator::{evaluate_run, write_report, EvalOptions, EvalReport, Predictor};
use infoseg::export::{write_index_png, write_overlay, ClassSidecar};
use infoseg::mi_objectives::{AssignmentMode, EstimatorKind};
use infoseg::trainer::{fit, FitOptions, Objective, TrainConfig};
use infoseg::{Error, ErrorKind};

use crate::run::{code_version, RunLock, RunManifest};

#[derive(Parser)]
#[command(
    name = "infoseg",
    version,
    about = "Unsupervised semantic segmentation by local-global MI maximization"
)]
struct Cli {
    /// Directory holding one subdirectory per run.
    #[arg(long, global = true, env = "INFOSEG_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Train a model on the training split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with Hungarian-matched pixel accuracy.
    Eval(EvalArgs),
    /// Train and evaluate the estimator / assignment / IIC grid.
    Ablate(ablate::AblateArgs),
    /// Segment a directory of unlabeled images.
    Segment(SegmentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with scene settings; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Total number of images.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Share of images placed in the evaluation split.
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Where a dataset lives and how to read it.
#[derive(Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Expected image height; read from the first image when omitted.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Center-crop larger images to the requested size.
    #[arg(long)]
    crop: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliEstimator {
    Jsd,
    Dv,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliAssignment {
    Soft,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliObjective {
    Infoseg,
    IicMi,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Run name; overrides the config.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_enum)]
    estimator: Option<CliEstimator>,
    #[arg(long, value_enum)]
    assignment: Option<CliAssignment>,
    #[arg(long, value_enum)]
    objective: Option<CliObjective>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from the newest checkpoint of the run.
    #[arg(long)]
    resume: bool,
    /// Delete an existing run of the same name first.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    /// Log every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "eval")]
    split: CliSplit,
    /// Output directory; defaults to `eval-<step>` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write color overlays.
    #[arg(long)]
    overlays: bool,
    /// Skip per-image segmentation PNGs.
    #[arg(long)]
    no_images: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliSplit {
    Train,
    Eval,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `metrics.json` from an evaluation, used to name the predicted classes.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    overlays: bool,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&cli.run_root, &args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
        Command::Ablate(args) => ablate::cmd_ablate(&cli.run_root, &args),
        Command::Segment(args) => cmd_segment(&args),
    }
}

/// 2 for configuration problems, 3 for bad data, 4 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
                ErrorKind::Other => 1,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 2;
        }
    }
    1
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn dir_is_nonempty(path: &Path) -> Result<bool> {
    Ok(path.is_dir() && fs::read_dir(path)?.next().is_some())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut config: SyntheticSceneConfig = read_toml(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(k) = args.num_classes {
        config.num_classes = k;
    }
    if !(0.0..1.0).contains(&args.eval_fraction) {
        bail!(Error::Config("--eval-fraction must lie in [0, 1)".into()));
    }
    if dir_is_nonempty(&args.out)? {
        if !args.force {
            bail!(Error::Config(format!(
                "{} is not empty; pass --force to replace it",
                args.out.display()
            )));
        }
        fs::remove_dir_all(&args.out)?;
    }
    let synthetic = generate_synthetic(&config, args.count)?;
    let n_eval = (args.count as f64 * args.eval_fraction).round() as usize;
    let ids: Vec<String> = synthetic.items.iter().map(|a| a.id().to_string()).collect();
    let (train, eval) = ids.split_at(args.count - n_eval);
    let meta = DatasetMeta {
        splits: Some(SplitIds {
            train: train.to_vec(),
            eval: eval.to_vec(),
        }),
        ..synthetic.meta
    };
    save_dataset(&args.out, &meta, &synthetic.items)?;
    fs::write(
        args.out.join("synth_config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    let freqs: Vec<String> = synthetic.class_frequencies.iter().map(|f| format!("{f:.3}")).collect();
    println!(
        "wrote {} images ({} train, {} eval) to {}; class pixel frequencies [{}]",
        args.count,
        train.len(),
        eval.len(),
        args.out.display(),
        freqs.join(", ")
    );
    Ok(())
}

/// Image geometry from flags, falling back to `meta.json` and the first stored image.
pub fn dataset_spec(args: &DataArgs) -> Result<ImageSpec> {
    let meta_path = args.data.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::Load {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?)
    .map_err(|e| Error::Schema {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;
    let (height, width) = match (args.height, args.width) {
        (Some(h), Some(w)) => (h, w),
        (h, w) => {
            let (fh, fw) = first_image_size(&args.data.join("images"))?;
            (h.unwrap_or(fh), w.unwrap_or(fw))
        }
    };
    let mut spec = ImageSpec::new(height, width, meta.channels);
    if args.crop {
        spec.fit = FitMode::CenterCrop;
    }
    Ok(spec)
}

fn first_image_size(dir: &Path) -> Result<(usize, usize)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Load {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        })
        .collect();
    paths.sort();
    let first = paths.first().ok_or_else(|| Error::Load {
        path: dir.to_path_buf(),
        msg: "no images found".into(),
    })?;
    let (w, h) = image::image_dimensions(first).map_err(|e| Error::Load {
        path: first.clone(),
        msg: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

fn apply_overrides(config: &mut TrainConfig, args: &TrainArgs) {
    if let Some(name) = &args.name {
        config.name = name.clone();
    }
    if let Some(e) = args.estimator {
        config.estimator = match e {
            CliEstimator::Jsd => EstimatorKind::Jsd,
            CliEstimator::Dv => EstimatorKind::Dv,
        };
    }
    if let Some(a) = args.assignment {
        config.assignment = match a {
            CliAssignment::Soft => AssignmentMode::Soft,
            CliAssignment::Hard => AssignmentMode::Hard,
        };
    }
    if let Some(o) = args.objective {
        config.objective = match o {
            CliObjective::Infoseg => Objective::Infoseg,
            CliObjective::IicMi => Objective::IicMi,
        };
    }
    if let Some(v) = args.max_steps {
        config.max_steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
}

/// Trains one run; returns its directory and final checkpoint.
pub fn train_run(
    run_root: &Path,
    config: &TrainConfig,
    data: &DataArgs,
    resume: bool,
    force: bool,
    log_every: u64,
) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    let run_dir = run_root.join(&config.name);
    if force && run_dir.exists() {
        fs::remove_dir_all(&run_dir)?;
    }
    let _lock = RunLock::acquire(&run_dir)?;
    let spec = dataset_spec(data)?;
    let images = load_split_images(&data.data, &spec, Split::Train)?;
    if images.is_empty() {
        bail!(Error::Config(format!("{} has no training images", data.data.display())));
    }
    let manifest = RunManifest {
        run_name: config.name.clone(),
        command: "train".into(),
        config: serde_json::to_value(config)?,
        dataset_fingerprint: fingerprint_images(&images),
        code_version: code_version(),
        seed: config.seed,
    };
    if resume {
        if let Ok(previous) = RunManifest::load(&run_dir) {
            if previous.dataset_fingerprint != manifest.dataset_fingerprint {
                bail!(Error::Config(format!(
                    "{} was trained on different data",
                    run_dir.display()
                )));
            }
        }
    }
    manifest.save(&run_dir)?;
    let options = FitOptions {
        run_dir: run_dir.clone(),
        resume,
        log_every,
    };
    let outcome = fit(&images, config, &options)?;
    let losses: Vec<f64> = outcome.records.iter().map(|r| r.loss).collect();
    plot::save(&plot::loss_curve(&losses, 640, 360), &run_dir.join("loss_curve.png"))?;
    Ok((run_dir, outcome.final_checkpoint))
}

fn cmd_train(run_root: &Path, args: &TrainArgs) -> Result<PathBuf> {
    let mut config: TrainConfig = read_toml(args.config.as_deref())?;
    apply_overrides(&mut config, args);
    let (run_dir, ckpt) = train_run(run_root, &config, &args.data, args.resume, args.force, args.log_every)?;
    println!("run {} finished; checkpoint {}", run_dir.display(), ckpt.display());
    Ok(ckpt)
}

/// Evaluates a checkpoint and writes the report, heatmap and segmentations into `out`.
pub fn eval_to_dir(
    checkpoint: &Path,
    data: &DataArgs,
    split: Split,
    out: &Path,
    export_images: bool,
    overlays: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let spec = dataset_spec(data)?;
    let dataset = load_dataset(&data.data, &spec, split)?;
    let options = EvalOptions {
        batch_size,
        export_dir: export_images.then(|| out.join("segmentations")),
        overlays,
        split,
    };
    let report = evaluate_run(&ckpt, &dataset, &options)?;
    write_report(out, &report, &dataset.meta.class_names)?;
    plot::save(
        &plot::confusion_heatmap(&report.confusion, 32),
        &out.join("confusion.png"),
    )?;
    Ok(report)
}

fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let out = match &args.out {
        Some(out) => out.clone(),
        None => {
            let step = Checkpoint::load(&args.checkpoint)?.step;
            args.checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join(format!("eval-{step:08}"))
        }
    };
    let split = match args.split {
        CliSplit::Train => Split::Train,
        CliSplit::Eval => Split::Eval,
    };
    let report = eval_to_dir(
        &args.checkpoint,
        &args.data,
        split,
        &out,
        !args.no_images,
        args.overlays,
        args.batch_size,
    )?;
    let m = &report.metrics;
    println!(
        "pixel accuracy {:.4} (best constant class {:.4}), mIoU {} over {} images; report in {}",
        m.pa,
        m.best_constant_pa,
        m.miou.map_or("undefined".to_string(), |v| format!("{v:.4}")),
        report.num_images,
        out.display()
    );
    Ok(report)
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let predictor = Predictor::from_checkpoint(&ckpt)?;
    let (h, w) = match (args.height, args.width) {
        (Some(h), Some(w)) => (h, w),
        _ => first_image_size(&args.input)?,
    };
    let spec = ImageSpec::new(h, w, ckpt.network_config.in_channels);
    let images = load_images(&args.input, &spec)?;
    fs::create_dir_all(&args.out)?;
    for chunk in images.chunks(args.batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        for (image, seg) in chunk.iter().zip(predictor.predict(&refs)?) {
            write_index_png(&args.out.join(format!("{}.png", image.id)), &seg)?;
            if args.overlays {
                write_overlay(&args.out.join(format!("{}_overlay.png", image.id)), image, &seg, 0.5)?;
            }
        }
    }
    let k = ckpt.network_config.num_classes;
    let sidecar = match &args.mapping {
        Some(path) => {
            let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)
                .with_context(|| format!("{} is not an evaluation report", path.display()))?;
            let matched: Vec<Option<usize>> = report.metrics.mapping.iter().map(|&t| Some(t)).collect();
            ClassSidecar::new(&matched, &report.class_names)
        }
        None => ClassSidecar::new(&vec![None; k], &[]),
    };
    sidecar.save(&args.out.join("classes.json"))?;
    println!("segmented {} images into {}", images.len(), args.out.display());
    Ok(())
}
