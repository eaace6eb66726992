//! `famcount`: synthetic data, target caches, training, evaluation,
//! single-image counting and the HTTP service.
//!
//! Exit codes: 0 ok, 2 usage, 3 checkpoint, 4 image, 5 dataset, 6 IO.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use famcount::adapt::adapt_prepared;
use famcount::annotation::{load_dataset, resize_for_model, write_dataset, AnnotatedImage, BBox, Dataset, SplitName};
use famcount::checkpoint::Checkpoint;
use famcount::correlation::MatcherConfig;
use famcount::eval::{evaluate_split, EvalOptions};
use famcount::features::BackboneSpec;
use famcount::heatmap::heatmap_png;
use famcount::losses::AdaptationConfig;
use famcount::pipeline::CountingPipeline;
use famcount::synth::{make_synthetic_suite, SuiteSize};
use famcount::targets::{generate_target, make_gaussian_spec, read_target_cache, write_target_cache};
use famcount::train::{count_mae, train_examples, LrSchedule, TrainConfig, TrainExample, BEST_CHECKPOINT, LAST_CHECKPOINT};
use famcount_server::{serve, ServeError, ServerConfig, DEFAULT_PORT, DEFAULT_STEPS, MAX_STEPS};
use serde_json::json;

const EXIT_USAGE: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_IMAGE: u8 = 4;
const EXIT_DATASET: u8 = 5;
const EXIT_IO: u8 = 6;

#[derive(Parser)]
#[command(name = "famcount", version, about = "Few-shot object counting with exemplar boxes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the canonical layout.
    Synth(SynthArgs),
    /// Precompute target density maps for a dataset.
    MakeTargets(MakeTargetsArgs),
    /// Train the density head.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write a report.
    Eval(EvalArgs),
    /// Count objects in one image given exemplar boxes.
    Count(CountArgs),
    /// Run the HTTP counting service.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Number of training images.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of validation images (unseen shape).
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Number of test images (another unseen shape).
    #[arg(long, default_value_t = 0)]
    test: usize,
}

#[derive(clap::Args)]
struct MakeTargetsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Height images are resized to before targets are drawn.
    #[arg(long, default_value_t = 384)]
    resize_height: u32,
    /// Cache directory; defaults to DATA/targets/h<HEIGHT>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    epochs: usize,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 384)]
    resize_height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Early-stop patience in epochs on validation MAE; 0 disables.
    #[arg(long, default_value_t = 100)]
    patience: usize,
    /// lite[:SEED], resnet50:WEIGHTS or resnet50-random[:SEED].
    #[arg(long, default_value = "lite")]
    backbone: String,
    /// Split used for validation and best-checkpoint selection.
    #[arg(long, default_value = "val")]
    val_split: SplitName,
    /// Learning-rate schedule: constant or cosine.
    #[arg(long, default_value = "constant")]
    schedule: LrSchedule,
    /// Steps of linear learning-rate warmup.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Scale on the initial last-layer weights (1 = plain fan-in init).
    #[arg(long, default_value_t = 1.0)]
    output_gain: f64,
    /// The head predicts this multiple of the density (fresh heads only;
    /// a warm start keeps its checkpoint's scale).
    #[arg(long, default_value_t = 1.0)]
    output_scale: f64,
    /// Warm-start from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: SplitName,
    #[arg(long, env = "FAMCOUNT_CKPT")]
    checkpoint: Option<PathBuf>,
    /// Run test-time adaptation on every image.
    #[arg(long)]
    adapt: bool,
    /// Adaptation steps per image.
    #[arg(long, default_value_t = DEFAULT_STEPS, value_parser = parse_steps)]
    steps: usize,
    /// Use the first N exemplar boxes of each image.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    exemplars: u8,
    /// Report path; defaults to stdout only.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-image CSV (id, gt_count, pred_count, abs_err).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CountArgs {
    image: PathBuf,
    /// Exemplar box as x1,y1,x2,y2 in image pixels; give 1 to 3.
    #[arg(long = "box", required = true, value_parser = parse_box)]
    boxes: Vec<BBox>,
    #[arg(long, env = "FAMCOUNT_CKPT")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    adapt: bool,
    #[arg(long, default_value_t = DEFAULT_STEPS, value_parser = parse_steps)]
    steps: usize,
    /// Write the density map as a PNG at the image's size.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, env = "FAMCOUNT_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "FAMCOUNT_CKPT")]
    checkpoint: Option<PathBuf>,
    /// Simultaneous model executions.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    max_concurrency: u16,
    /// Directory served under /ui/.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

fn parse_steps(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n <= MAX_STEPS => Ok(n),
        _ => Err(format!("expected an integer in 0..={MAX_STEPS}")),
    }
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("`{s}` is not x1,y1,x2,y2"))?;
    match v[..] {
        [x1, y1, x2, y2] => Ok(BBox::new(x1, y1, x2, y2)),
        _ => Err(format!("`{s}` has {} numbers, expected 4 (x1,y1,x2,y2)", v.len())),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn code(code: u8) -> impl Fn(famcount::Error) -> Failure {
    move |e| Failure::new(code, e)
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_failure(dir))?;
    }
    fs::write(path, bytes).map_err(io_failure(path))
}

fn load_checkpoint(path: Option<&Path>) -> CliResult<(Checkpoint, CountingPipeline)> {
    let path = path.ok_or_else(|| Failure::new(EXIT_CHECKPOINT, "no checkpoint given (use --checkpoint or FAMCOUNT_CKPT)"))?;
    let ckpt = Checkpoint::load(path).map_err(code(EXIT_CHECKPOINT))?;
    let pipeline = CountingPipeline::for_checkpoint(&ckpt).map_err(code(EXIT_CHECKPOINT))?;
    Ok((ckpt, pipeline))
}

fn open_dataset(root: &Path) -> CliResult<Dataset> {
    load_dataset(root).map_err(code(EXIT_DATASET))
}

fn load_split(ds: &Dataset, split: SplitName) -> CliResult<Vec<AnnotatedImage>> {
    if ds.split(split).is_none_or(|s| s.image_ids.is_empty()) {
        return Err(Failure::new(EXIT_DATASET, format!("split `{split}` is missing or empty in {}", ds.root.display())));
    }
    ds.split_records(split)
        .into_iter()
        .map(|r| r.load().map_err(code(EXIT_DATASET)))
        .collect()
}

fn target_dir(root: &Path, height: u32) -> PathBuf {
    root.join("targets").join(format!("h{height}"))
}

fn synth(args: SynthArgs) -> CliResult {
    let size = SuiteSize {
        train: args.n,
        val: args.val,
        test: args.test,
    };
    let suite = make_synthetic_suite(args.seed, size).map_err(code(EXIT_USAGE))?;
    write_dataset(&args.out, &suite.images, &suite.splits).map_err(code(EXIT_IO))?;
    let ds = open_dataset(&args.out)?;
    println!(
        "{}",
        json!({ "out": args.out, "images": ds.len(), "warnings": ds.warnings.len() })
    );
    Ok(())
}

fn make_targets(args: MakeTargetsArgs) -> CliResult {
    let ds = open_dataset(&args.data)?;
    let out = args.out.unwrap_or_else(|| target_dir(&args.data, args.resize_height));
    for record in ds.records.values() {
        let img = record.load().map_err(code(EXIT_DATASET))?;
        let resized = resize_for_model(&img, args.resize_height).map_err(code(EXIT_DATASET))?;
        let target = generate_target(&resized.dots, resized.height() as usize, resized.width() as usize)
            .map_err(code(EXIT_DATASET))?;
        let spec = make_gaussian_spec(&resized.dots).map_err(code(EXIT_DATASET))?;
        write_target_cache(&out, &record.id, &target, &spec).map_err(code(EXIT_IO))?;
    }
    println!("{}", json!({ "out": out, "targets": ds.len() }));
    Ok(())
}

/// Prepares images, using cached targets when a cache for this height
/// exists and matches the model grid.
fn prepare(pipeline: &CountingPipeline, images: &[AnnotatedImage], cache: &Path) -> CliResult<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let prepared = match pipeline.prepare(img) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping `{}`: {e}", img.id);
                continue;
            }
        };
        let (h, w) = (prepared.stack.image_height, prepared.stack.image_width);
        let target = match read_target_cache(cache, &img.id) {
            Ok((t, _)) if (t.height(), t.width()) == (h, w) => t,
            _ => generate_target(&prepared.dots, h, w).map_err(code(EXIT_DATASET))?,
        };
        out.push(TrainExample { prepared, target });
    }
    Ok(out)
}

fn train(args: TrainArgs) -> CliResult {
    let backbone: BackboneSpec = args.backbone.parse().map_err(code(EXIT_USAGE))?;
    let ds = open_dataset(&args.data)?;
    let pipeline = CountingPipeline::new(backbone, MatcherConfig::default(), args.resize_height)
        .map_err(code(EXIT_CHECKPOINT))?;
    let init = match &args.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(code(EXIT_CHECKPOINT))?;
            ckpt.ensure_compatible(&pipeline.fingerprint()).map_err(code(EXIT_CHECKPOINT))?;
            Some(ckpt.params)
        }
        None => None,
    };
    let cache = target_dir(&args.data, args.resize_height);
    let train_images = load_split(&ds, SplitName::Train)?;
    let val_images = if ds.split(args.val_split).is_some_and(|s| !s.image_ids.is_empty()) {
        load_split(&ds, args.val_split)?
    } else {
        log::warn!("no `{}` images, training without validation", args.val_split);
        Vec::new()
    };
    let train_set = prepare(&pipeline, &train_images, &cache)?;
    let val_set = prepare(&pipeline, &val_images, &cache)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        patience: (args.patience > 0).then_some(args.patience),
        resize_height: args.resize_height,
        seed: args.seed,
        checkpoint_dir: Some(args.out.clone()),
        max_iterations: args.max_iterations,
        max_grad_norm: None,
        schedule: args.schedule,
        warmup_steps: args.warmup,
        output_gain: args.output_gain,
        output_scale: args.output_scale,
    };
    let outcome = train_examples(&pipeline.fingerprint(), &train_set, &val_set, &cfg, init).map_err(|e| match e {
        famcount::Error::Io(_) => Failure::new(EXIT_IO, e),
        famcount::Error::Config(_) => Failure::new(EXIT_USAGE, e),
        other => Failure::new(EXIT_DATASET, other),
    })?;
    let train_mae = count_mae(&outcome.params, &train_set).map_err(code(EXIT_DATASET))?;
    let best = outcome.best.as_ref().map(|(epoch, mae, _)| json!({ "epoch": epoch, "val_mae": mae }));
    println!(
        "{}",
        json!({
            "iterations": outcome.iterations,
            "epochs": outcome.log.len(),
            "final_loss": outcome.log.last().map(|r| r.mean_loss),
            "train_mae": train_mae,
            "best": best,
            "checkpoint": args.out.join(if outcome.best.is_some() { BEST_CHECKPOINT } else { LAST_CHECKPOINT }),
        })
    );
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let (ckpt, pipeline) = load_checkpoint(args.checkpoint.as_deref())?;
    let ds = open_dataset(&args.data)?;
    let images = load_split(&ds, args.split)?;
    let opts = EvalOptions {
        adapt: args.adapt,
        n_exemplars: args.exemplars as usize,
        adaptation: AdaptationConfig::default().with_steps(args.steps),
    };
    let mut report = evaluate_split(&pipeline, &ckpt.params, args.split.as_str(), &images, &opts)
        .map_err(code(EXIT_DATASET))?;
    report.config.checkpoint = args.checkpoint.as_ref().map(|p| p.display().to_string());
    if let Some(path) = &args.report {
        write_file(path, report.to_json().map_err(code(EXIT_IO))?.as_bytes())?;
    }
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(code(EXIT_IO))?;
        write_file(path, &buf)?;
    }
    eprintln!("{}", report.summary());
    println!(
        "{}",
        json!({ "split": report.split, "n": report.n, "mae": report.mae, "rmse": report.rmse })
    );
    Ok(())
}

fn count(args: CountArgs) -> CliResult {
    if args.boxes.len() > 3 {
        Cli::command()
            .error(ErrorKind::TooManyValues, format!("--box given {} times, at most 3 allowed", args.boxes.len()))
            .exit();
    }
    let (ckpt, pipeline) = load_checkpoint(args.checkpoint.as_deref())?;
    let pixels = image::open(&args.image)
        .map_err(|e| Failure::new(EXIT_IMAGE, format!("{}: {e}", args.image.display())))?
        .to_rgb8();
    let (width, height) = pixels.dimensions();
    for (i, b) in args.boxes.iter().enumerate() {
        if !b.is_ordered() || !b.within(width as f64, height as f64) {
            return Err(Failure::new(
                EXIT_USAGE,
                format!("--box {i} {b} is not an ordered box inside the {width}x{height} image"),
            ));
        }
    }
    let start = Instant::now();
    let image = AnnotatedImage {
        id: args.image.display().to_string(),
        pixels,
        dots: Vec::new(),
        exemplars: args.boxes,
        category: String::new(),
    };
    let prepared = pipeline.prepare(&image).map_err(code(EXIT_USAGE))?;
    let steps = if args.adapt { args.steps } else { 0 };
    let pred = adapt_prepared(&prepared, &ckpt.params, &AdaptationConfig::default().with_steps(steps))
        .map_err(code(EXIT_USAGE))?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &args.heatmap {
        let png = heatmap_png(&pred.density, width, height).map_err(code(EXIT_IO))?;
        write_file(path, &png)?;
    }
    if pred.trace.diverged {
        log::warn!("adaptation diverged; count is from the last finite step");
    }
    println!(
        "{}",
        json!({ "count": pred.count, "adapted": args.adapt, "steps": pred.trace.steps_taken(), "seconds": seconds })
    );
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> CliResult {
    let cfg = ServerConfig {
        port: args.port,
        checkpoint: args.checkpoint,
        max_concurrency: args.max_concurrency as usize,
        ui_dir: args.ui_dir,
        request_timeout: std::time::Duration::from_secs(args.timeout),
        ..ServerConfig::default()
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_IO, e))?;
    runtime.block_on(serve(cfg)).map_err(|e| match e {
        ServeError::Model(e) => Failure::new(EXIT_CHECKPOINT, e),
        ServeError::Io(e) => Failure::new(EXIT_IO, e),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::MakeTargets(a) => make_targets(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Count(a) => count(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
