use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Deserialize;

use attenlab::data::{export_dataset, load_dataset, read_raster, synth_generate, Dataset, CLASS_NAMES};
use attenlab::evaluation::{cross_validate, evaluate, metric_rows, roc, roc_csv, CvOptions, METRICS_HEADER};
use attenlab::interpret::{cam, guided_backprop, render, Heatmap, RenderMode};
use attenlab::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use attenlab::training::{train_with, TrainConfig};
use attenlab::{Error, Result};

const DEFAULT_SEED: u64 = 42;
const THREADS_ENV: &str = "ATTENLAB_THREADS";

/// Attention CNN toolkit: synthetic data, training, cross-validation,
/// evaluation and saliency maps.
#[derive(Parser)]
#[command(name = "attenlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class motif dataset.
    Synth(SynthArgs),
    /// Train one model, writing a checkpoint and a per-epoch history CSV.
    Train(TrainArgs),
    /// k-fold cross-validation, writing metrics and pooled ROC CSVs.
    Crossval(CrossvalArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Class activation maps for images.
    Cam(SaliencyArgs),
    /// Guided backpropagation maps for images.
    Gb(SaliencyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file whose keys mirror the flag names; flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed; 0 draws one from the OS and prints it [default: 42].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Images per class [default: 200].
    #[arg(long)]
    n: Option<usize>,
    /// Image side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// Architecture preset: hienet-mini or hienet-full [default: hienet-mini].
    #[arg(long)]
    preset: Option<String>,
    /// Drop both attention blocks.
    #[arg(long)]
    no_attention: bool,
    /// Training epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 0.005].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without improvement before the rate is halved [default: 3].
    #[arg(long)]
    patience: Option<usize>,
    /// Disable random flips.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset root with NE, EP, EH, EA subdirectories.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.hien and history.csv [default: run].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of folds [default: 10].
    #[arg(long)]
    folds: Option<usize>,
    /// Folds trained concurrently [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
    /// Keep class proportions equal across folds.
    #[arg(long)]
    stratified: bool,
    /// Output directory for metrics.csv and roc.csv [default: crossval].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also report benign/malignant metrics and the ROC curve.
    #[arg(long)]
    binary: bool,
    /// Output directory for metrics.csv (and roc.csv) [default: eval].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Style {
    Gray,
    Overlay,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target class index; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    /// Output rendering [default: overlay].
    #[arg(long, value_enum)]
    mode: Option<Style>,
    /// Output directory [default: maps].
    #[arg(long)]
    out: Option<PathBuf>,
    /// PNG or JPEG images.
    images: Vec<PathBuf>,
}

/// Values read from `--config`. Keys use the flag spelling.
#[derive(Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    n: Option<usize>,
    size: Option<usize>,
    preset: Option<String>,
    no_attention: Option<bool>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    patience: Option<usize>,
    no_augment: Option<bool>,
    data: Option<PathBuf>,
    folds: Option<usize>,
    jobs: Option<usize>,
    stratified: Option<bool>,
    checkpoint: Option<PathBuf>,
    binary: Option<bool>,
    class: Option<usize>,
    mode: Option<Style>,
    images: Option<Vec<PathBuf>>,
}

/// Usage errors exit 1, everything else 2.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    let seed = match flag.or(file).unwrap_or(DEFAULT_SEED) {
        0 => rand::rng().random_range(1..=u64::MAX),
        s => s,
    };
    println!("seed: {seed}");
    seed
}

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn flag(set: bool, file: Option<bool>) -> bool {
    set || file.unwrap_or(false)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn configs(args: &ModelArgs, file: &FileConfig, seed: u64) -> CliResult<(ModelConfig, TrainConfig)> {
    let preset = args.preset.clone().or(file.preset.clone());
    let bad = |e: Error| usage(e.to_string());
    let mut model = ModelConfig::preset(preset.as_deref().unwrap_or("hienet-mini")).map_err(bad)?;
    if flag(args.no_attention, file.no_attention) {
        model = model.without_attention();
    }
    model.seed = seed;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        patience: args.patience.or(file.patience).unwrap_or(defaults.patience),
        augment: !flag(args.no_augment, file.no_augment),
        seed,
        ..defaults
    };
    model.validate().map_err(bad)?;
    train.validate().map_err(bad)?;
    Ok((model, train))
}

fn load(root: &Path) -> Result<Dataset> {
    let (dataset, report) = load_dataset(root)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "loaded {} images from {} ({} skipped)",
        dataset.len(),
        root.display(),
        report.skipped
    );
    Ok(dataset)
}

fn run_synth(args: SynthArgs) -> CliResult<()> {
    let file = read_config(args.common.config.as_deref())?;
    let out = require(args.out.or(file.out), "out")?;
    let seed = resolve_seed(args.common.seed, file.seed);
    let n = args.n.or(file.n).unwrap_or(200);
    let size = args.size.or(file.size).unwrap_or(64);
    let dataset = synth_generate(n, size, seed)?;
    export_dataset(&dataset, &out)?;
    println!("wrote {} images to {}", dataset.len(), out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let file = read_config(args.common.config.as_deref())?;
    let data = require(args.data.clone().or(file.data.clone()), "data")?;
    let out = args.out.clone().or(file.out.clone()).unwrap_or_else(|| "run".into());
    let seed = resolve_seed(args.common.seed, file.seed);
    let (model_config, train_config) = configs(&args.model, &file, seed)?;
    let dataset = load(&data)?;
    create_dir(&out)?;
    let mut model = Model::build(&model_config)?;
    let start = Instant::now();
    let history = train_with(&mut model, &dataset, &train_config, |r| {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  acc {:.4}",
            r.epoch, r.lr, r.train_loss, r.train_acc
        );
    })?;
    save_checkpoint(&model, out.join("model.hien"))?;
    write(&out.join("history.csv"), history.to_csv())?;
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    println!("wrote {}", out.display());
    Ok(())
}

fn run_crossval(args: CrossvalArgs) -> CliResult<()> {
    let file = read_config(args.common.config.as_deref())?;
    let data = require(args.data.clone().or(file.data.clone()), "data")?;
    let out = args.out.clone().or(file.out.clone()).unwrap_or_else(|| "crossval".into());
    let seed = resolve_seed(args.common.seed, file.seed);
    let (model_config, train_config) = configs(&args.model, &file, seed)?;
    let jobs = args.jobs.or(file.jobs).unwrap_or(1).min(thread_cap().unwrap_or(usize::MAX));
    let opts = CvOptions {
        folds: args.folds.or(file.folds).unwrap_or(10),
        seed,
        stratified: flag(args.stratified, file.stratified),
        jobs,
    };
    let dataset = load(&data)?;
    create_dir(&out)?;
    let start = Instant::now();
    let report = cross_validate(&dataset, &model_config, &train_config, opts, |fold, r| {
        println!(
            "fold {:>2}  epoch {:>3}  lr {:.6}  loss {:.4}  acc {:.4}",
            fold + 1,
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc
        );
    })?;
    for f in &report.folds {
        for w in &f.warnings {
            eprintln!("warning: {w}");
        }
    }
    write(&out.join("metrics.csv"), report.metrics_csv())?;
    let probs = report.pooled_probs(dataset.len());
    let scores: Vec<f64> = probs.iter().map(|p| p[attenlab::data::MALIGNANT_CLASS]).collect();
    let truth: Vec<bool> = dataset.labels().iter().map(|&l| l == attenlab::data::MALIGNANT_CLASS).collect();
    write(&out.join("roc.csv"), roc_csv(&roc(&scores, &truth)?))?;
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    println!("wrote {}", out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> CliResult<()> {
    let file = read_config(args.common.config.as_deref())?;
    let checkpoint = require(args.checkpoint.or(file.checkpoint), "checkpoint")?;
    let data = require(args.data.or(file.data), "data")?;
    let out = args.out.or(file.out).unwrap_or_else(|| "eval".into());
    resolve_seed(args.common.seed, file.seed);
    let binary = flag(args.binary, file.binary);
    let model = load_checkpoint(&checkpoint)?;
    let dataset = load(&data)?;
    let (evaluation, _) = evaluate(&model, &dataset, 32)?;
    create_dir(&out)?;
    let [four, bin] = metric_rows("all", &evaluation);
    let mut csv = format!("{METRICS_HEADER}\n{four}\n");
    if binary {
        csv.push_str(&bin);
        csv.push('\n');
        match &evaluation.roc {
            Some(points) => write(&out.join("roc.csv"), roc_csv(points))?,
            None => eprintln!("warning: ROC needs both benign and malignant images; roc.csv not written"),
        }
    }
    write(&out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_saliency(args: SaliencyArgs, gb: bool) -> CliResult<()> {
    let file = read_config(args.common.config.as_deref())?;
    let checkpoint = require(args.checkpoint.or(file.checkpoint), "checkpoint")?;
    let out = args.out.or(file.out).unwrap_or_else(|| "maps".into());
    let images = if args.images.is_empty() {
        file.images.unwrap_or_default()
    } else {
        args.images
    };
    if images.is_empty() {
        return Err(usage("no input images given"));
    }
    resolve_seed(args.common.seed, file.seed);
    let mode = match args.mode.or(file.mode).unwrap_or(Style::Overlay) {
        Style::Gray => RenderMode::Gray,
        Style::Overlay => RenderMode::Overlay,
    };
    let class = args.class.or(file.class);
    let model = load_checkpoint(&checkpoint)?;
    create_dir(&out)?;
    for path in &images {
        let raster = read_raster(path)?;
        let target = match class {
            Some(c) => c,
            None => {
                let x = attenlab::training::batch_tensor(&[&raster], model.config().input_size)?;
                let p = model.predict(&x)?;
                (0..p.numel()).fold(0, |b, i| if p.data()[i] > p.data()[b] { i } else { b })
            }
        };
        let map: Heatmap = if gb {
            guided_backprop(&model, &raster, target)?
        } else {
            cam(&model, &raster, target)?
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(map.file_name(stem));
        render(&map, &raster, mode)?.save(&dest)?;
        let name = CLASS_NAMES.get(target).copied().unwrap_or("?");
        println!("{} -> {} (class {target} {name})", path.display(), dest.display());
    }
    Ok(())
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    attenlab::retain_heap_memory();
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Crossval(a) => run_crossval(a),
        Command::Eval(a) => run_eval(a),
        Command::Cam(a) => run_saliency(a, false),
        Command::Gb(a) => run_saliency(a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
