//! Command-line front end: synth → describe → embed → train → sweep →
//! visualize.
//!
//! Settings resolve as: flag, then `CROSSALIGN_SEED` for the seed, then the
//! `--config` file (`key=value` lines), then the built-in default.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{embedding_analysis, emit_figure, run_sweep, short_vs_long_report, SweepGrid, SweepParam, TsneConfig};
use crate::cache::{build_cache, read_cache, write_cache, SyntheticEncoder};
use crate::data::{read_dataset, synthetic_dataset, write_dataset, Dataset, SynthConfig};
use crate::descriptions::{build_description_set, load_set, save_set, validate_coverage, PromptKind, StubProvider};
use crate::error::{Error, Result};
use crate::losses::AlignmentConfig;
use crate::models::{init_params, Arch, ModelConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, TrainConfig, TrainState, Trainer};

#[derive(Debug, Parser)]
#[command(name = "crossalign", version, about = "Train classifiers aligned to cached text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic texture-classification dataset.
    Synth(SynthArgs),
    /// Build a description set with the offline stub provider.
    Describe(DescribeArgs),
    /// Encode a description set into an embedding cache.
    Embed(EmbedArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Run a λ or τ ablation grid.
    Sweep(SweepArgs),
    /// Compare short against long description caches.
    Compare(CompareArgs),
    /// t-SNE of cached embeddings with a cluster-quality report.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 8)]
    size: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, env = "CROSSALIGN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "short")]
    kind: PromptKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    descriptions: PathBuf,
    /// Supplies the class labels the synthetic encoder keys on.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "synthetic", value_parser = ["synthetic"])]
    encoder: String,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, env = "CROSSALIGN_SEED", default_value_t = 0)]
    seed: u64,
    /// Keep raw encoder output instead of unit rows.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by every command that trains.
#[derive(Debug, Args)]
struct RecipeArgs {
    /// `key=value` file supplying any of these settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    /// Feature width of the backbone.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Fraction held out for validation, taken from the end of the sorted ids.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Skip L2 normalization of the projected features.
    #[arg(long)]
    raw_projection: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, env = "CROSSALIGN_SEED")]
    seed: Option<u64>,
    /// Per-epoch CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the final model and optimizer state here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total epochs (the schedule still spans --epochs).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value = "lambda")]
    param: SweepParam,
    /// Comma-separated grid; defaults to the standard grid for --param.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// λ held fixed during a τ sweep.
    #[arg(long)]
    lambda: Option<f64>,
    /// τ held fixed during a λ sweep.
    #[arg(long)]
    tau: Option<f64>,
    /// Results table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    short_cache: PathBuf,
    #[arg(long)]
    long_cache: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Supplies the class label of each cached id.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = crate::analysis::DEFAULT_PER_CLASS)]
    per_class: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, env = "CROSSALIGN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

const CONFIG_KEYS: &[&str] = &[
    "dataset", "cache", "arch", "d", "epochs", "batch_size", "lr", "min_lr", "momentum", "weight_decay",
    "eval_every", "val_fraction", "lambda", "tau", "seed",
];

/// Parsed `key=value` settings file.
#[derive(Debug, Default)]
struct FileConfig {
    path: PathBuf,
    values: HashMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let key = key.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("{}:{}: unknown key `{key}`", path.display(), i + 1)));
            }
            values.insert(key, value.trim().to_owned());
        }
        Ok(Self { path: path.to_owned(), values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse().map_err(|e| {
                    Error::Config(format!("{}: invalid value `{v}` for `{key}`: {e}", self.path.display()))
                })
            })
            .transpose()
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

struct Resolved {
    dataset: Dataset,
    model: ModelConfig,
    train: TrainConfig,
    val_fraction: f64,
    file: FileConfig,
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("missing required setting --{flag}")))
}

fn resolve(recipe: &RecipeArgs, lambda: Option<f64>, tau: Option<f64>, seed: Option<u64>) -> Result<Resolved> {
    let file = FileConfig::load(recipe.config.as_deref())?;
    let dataset_path: PathBuf = require(file.pick(recipe.dataset.clone(), "dataset")?, "dataset")?;
    let dataset = read_dataset(&dataset_path)?;
    let defaults = TrainConfig::default();
    let align_defaults = AlignmentConfig::default();
    let arch = file.pick(recipe.arch, "arch")?.unwrap_or(Arch::TinyCnn);
    let mut model = ModelConfig::new(arch, dataset.shape(), dataset.num_classes());
    model.d = file.pick(recipe.d, "d")?.unwrap_or(model.d);
    let alignment = AlignmentConfig {
        lambda: file.pick(lambda, "lambda")?.unwrap_or(align_defaults.lambda),
        tau: file.pick(tau, "tau")?.unwrap_or(align_defaults.tau),
        normalize_projection: !recipe.raw_projection,
    };
    let train = TrainConfig {
        epochs: file.pick(recipe.epochs, "epochs")?.unwrap_or(defaults.epochs),
        batch_size: file.pick(recipe.batch_size, "batch_size")?.unwrap_or(defaults.batch_size),
        base_lr: file.pick(recipe.lr, "lr")?.unwrap_or(defaults.base_lr),
        min_lr: file.pick(recipe.min_lr, "min_lr")?.unwrap_or(defaults.min_lr),
        momentum: file.pick(recipe.momentum, "momentum")?.unwrap_or(defaults.momentum),
        weight_decay: file.pick(recipe.weight_decay, "weight_decay")?.unwrap_or(defaults.weight_decay),
        seed: file.pick(seed, "seed")?.unwrap_or(defaults.seed),
        alignment: Some(alignment),
        eval_every: file.pick(recipe.eval_every, "eval_every")?.unwrap_or(defaults.eval_every),
    };
    let val_fraction = file.pick(recipe.val_fraction, "val_fraction")?.unwrap_or(0.2);
    Ok(Resolved { dataset, model, train, val_fraction, file })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(args: SynthArgs) -> Result<()> {
    let data = synthetic_dataset(&SynthConfig {
        classes: args.classes,
        per_class: args.per_class,
        channels: args.channels,
        size: args.size,
        noise: args.noise,
        seed: args.seed,
    })?;
    write_dataset(&data, &args.out)?;
    println!("wrote {} images to {}", data.len(), args.out.display());
    Ok(())
}

fn describe(args: DescribeArgs) -> Result<()> {
    let data = read_dataset(&args.dataset)?;
    let provider = StubProvider::new(data.label_pairs());
    let set = build_description_set(data.ids(), &provider, args.kind)?;
    save_set(&set, &args.out)?;
    println!("wrote {} {} descriptions to {}", set.len(), args.kind, args.out.display());
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let set = load_set(&args.descriptions)?;
    let data = read_dataset(&args.dataset)?;
    let coverage = validate_coverage(&set, data.ids());
    if let Some(id) = coverage.orphans.first() {
        return Err(Error::Validation(format!(
            "{}: `{id}` has no label in {}",
            args.descriptions.display(),
            args.dataset.display()
        )));
    }
    let encoder = SyntheticEncoder::new(data.label_pairs(), args.k, args.noise_sigma, args.seed)?;
    let cache = build_cache(&set, &encoder, !args.no_normalize)?;
    write_cache(&cache, &args.out)?;
    println!("wrote {}×{} cache to {}", cache.len(), cache.k(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let r = resolve(&args.recipe, args.lambda, args.tau, args.seed)?;
    let cache_path: PathBuf = require(r.file.pick(args.cache.clone(), "cache")?, "cache")?;
    let cache = read_cache(&cache_path)?;
    let (train_set, val_set) = r.dataset.split_validation(r.val_fraction)?;
    let trainer = Trainer::new(r.train.clone(), &train_set, &val_set, &cache)?;
    let mut state = match &args.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model = ModelConfig { k: cache.k(), init_seed: r.train.seed, ..r.model };
            TrainState::new(init_params(&model)?)
        }
    };
    let report = trainer.fit_from(&mut state, args.stop_after)?;
    if let Some(path) = &args.report {
        report.write_csv(path)?;
    }
    if let Some(path) = &args.checkpoint {
        save_checkpoint(&state, path)?;
    }
    for rec in &report.epochs {
        let val = rec.val_top1.map_or_else(String::new, |v| format!(" val_top1={v:.4}"));
        println!(
            "epoch {:>3} lr={:.5} ce={:.4} dist={:.4} total={:.4} train_top1={:.4}{val}",
            rec.epoch, rec.lr, rec.ce_loss, rec.dist_loss, rec.total_loss, rec.train_top1
        );
    }
    println!("final val_top1={:.4}", report.final_val_top1);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let r = resolve(&args.recipe, args.lambda, args.tau, None)?;
    let cache_path: PathBuf = require(r.file.pick(args.cache.clone(), "cache")?, "cache")?;
    let cache = read_cache(&cache_path)?;
    let (train_set, val_set) = r.dataset.split_validation(r.val_fraction)?;
    let alignment = r.train.alignment.expect("resolved configs carry alignment");
    let mut grid = SweepGrid::standard(args.param, r.train);
    grid.fixed = match args.param {
        SweepParam::Lambda => alignment.tau,
        SweepParam::Tau => alignment.lambda,
    };
    if let Some(values) = args.values {
        grid.values = values;
    }
    if let Some(seeds) = args.seeds {
        grid.seeds = seeds;
    }
    let model = ModelConfig { k: cache.k(), ..r.model };
    let table = run_sweep(&grid, &model, &train_set, &val_set, &cache)?;
    let csv = table.to_csv();
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    for row in &table.rows {
        if let Some(msg) = row.failure() {
            eprintln!("warning: {}={} failed: {msg}", grid.param, row.value);
        }
    }
    if let Some(best) = table.best() {
        println!("best {}={} mean_top1={:.4}", grid.param, best.value, best.mean().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let r = resolve(&args.recipe, args.lambda, args.tau, None)?;
    let short = read_cache(&args.short_cache)?;
    let long = read_cache(&args.long_cache)?;
    let (train_set, val_set) = r.dataset.split_validation(r.val_fraction)?;
    let seeds = args.seeds.unwrap_or_else(|| crate::analysis::sweep::DEFAULT_SEEDS.to_vec());
    let model = ModelConfig { k: short.k(), ..r.model };
    let table = short_vs_long_report(&model, &r.train, &seeds, &train_set, &val_set, &short, &long)?;
    let csv = table.to_csv();
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn visualize(args: VisualizeArgs) -> Result<()> {
    let cache = read_cache(&args.cache)?;
    let data = read_dataset(&args.dataset)?;
    let labels: HashMap<String, usize> = data.label_pairs().collect();
    let config = TsneConfig {
        perplexity: args.perplexity,
        iterations: args.iterations,
        seed: args.seed,
        ..TsneConfig::default()
    };
    let analysis = embedding_analysis(&cache, &labels, args.classes, args.per_class, &config)?;
    if let Some(path) = &args.out_svg {
        emit_figure(&analysis.points(), &analysis.labels, path)?;
    }
    if let Some(path) = &args.out_csv {
        write_text(path, &analysis.to_csv())?;
    }
    println!("{}", analysis.summary());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Describe(a) => describe(a),
        Command::Embed(a) => embed(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::Visualize(a) => visualize(a),
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit
/// status: 0 success, 2 usage or configuration, 3 validation or format,
/// 4 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
