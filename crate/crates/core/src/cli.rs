//! The `fusionette` command line: synthetic data generation, training,
//! evaluation, the fusion-variant ablation sweep and split-count checks.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error (bad flag, invalid value or configuration) |
//! | 3 | unknown variant name |
//! | 4 | malformed dataset or model file |
//! | 5 | dimension or label-space mismatch |
//! | 6 | training or data error (empty split, unknown category, ...) |
//! | 7 | I/O error |
//! | 8 | ablation finished but at least one variant failed |
//! | 9 | split counts disagree with the reference table |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_dataset_dir, read_split_header, validate_counts, write_split, Dataset, SplitName, SplitSizes,
    SyntheticKind, Table1Row,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::{Activation, VariantName, VariantSpec};
use crate::metrics::{self, evaluate, MeanMetrics, MetricsReport};
use crate::model::{load_model, save_model};
use crate::train::{multi_run, MultiRunOutcome, TrainConfig, TrainHistory};

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const UNKNOWN_VARIANT: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const DIMENSION: i32 = 5;
    pub const TRAINING: i32 = 6;
    pub const IO: i32 = 7;
    pub const PARTIAL_FAILURE: i32 = 8;
    pub const COUNT_MISMATCH: i32 = 9;
}

pub const THREADS_ENV: &str = "FUSIONETTE_THREADS";

/// Maps a library error to its process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UnknownVariant(_) => exit::UNKNOWN_VARIANT,
        Error::Format(_) | Error::Json(_) => exit::FORMAT,
        Error::Shape { .. } | Error::Dimension(_) | Error::LabelOutOfRange { .. } => exit::DIMENSION,
        Error::InvalidConfig(_) => exit::USAGE,
        Error::EmptySplit(_) | Error::UnknownCategory { .. } | Error::NonScalarLoss(_) | Error::MissingGrad(_) => {
            exit::TRAINING
        }
        Error::Io(_) => exit::IO,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fusionette",
    version,
    about = "Multimodal fusion classifier over frozen embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/validation/test MMEB files of a synthetic task.
    GenSynth(GenSynthArgs),
    /// Train one variant for several runs and score it on the test split.
    Train(TrainArgs),
    /// Score a saved model on one split.
    Eval(EvalArgs),
    /// Train and score several variants with shared seeds.
    Ablate(AblateArgs),
    /// Compare split sizes in MMEB headers against a reference task.
    Counts(CountsArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value = "xor")]
    pub kind: String,
    /// Training records.
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    /// Validation records (default: n / 8, at least 1).
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test records (default: n / 8, at least 1).
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub dim_image: usize,
    #[arg(long, default_value_t = 512)]
    pub dim_text: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimizer and architecture knobs shared by `train` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Width of each guided projection.
    #[arg(long, default_value_t = VariantSpec::DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Tokens per modality for self- and cross-attention.
    #[arg(long, default_value_t = VariantSpec::DEFAULT_N_TOK)]
    pub n_tok: usize,
    /// Tokens of the fused vector for differential attention.
    #[arg(long, default_value_t = VariantSpec::DEFAULT_N_TOK_FUSED)]
    pub n_tok_fused: usize,
    /// relu or tanh.
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value_t = 0.8)]
    pub lambda_init: f64,
}

impl HyperArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            runs: self.runs,
        }
    }

    pub fn variant_spec(&self, name: VariantName, dataset: &Dataset) -> Result<VariantSpec> {
        let activation = match self.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown activation `{other}` (expected relu or tanh)"
                )))
            }
        };
        let spec = VariantSpec {
            n_tok: self.n_tok,
            n_tok_fused: self.n_tok_fused,
            h: self.hidden,
            activation,
            lambda_init: self.lambda_init,
            ..VariantSpec::new(
                name,
                dataset.train.dim_image,
                dataset.train.dim_text,
                dataset.train.num_classes,
            )
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub variant: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `all` or a comma-separated list of variant names.
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// CrisisMMD task number (1, 2 or 3).
    #[arg(long)]
    pub task: u8,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Counts(a) => cmd_counts(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Prints pretty JSON to stdout. A closed pipe (`| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSidecar {
    pub kind: SyntheticKind,
    pub sizes: SplitSizes,
    pub dim_image: usize,
    pub dim_text: usize,
    pub seed: u64,
    pub files: Vec<String>,
    pub tool_version: String,
}

pub const SIDECAR_FILE: &str = "synthetic.json";

pub fn cmd_gen_synth(a: &GenSynthArgs) -> Result<i32> {
    let kind: SyntheticKind = a.kind.parse()?;
    if a.n == 0 {
        return Err(Error::InvalidConfig("--n must be at least 1".into()));
    }
    let small = (a.n / 8).max(1);
    let sizes = SplitSizes::new(a.n, a.n_val.unwrap_or(small), a.n_test.unwrap_or(small));
    let splits = gen_synthetic(kind, sizes, a.dim_image, a.dim_text, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for split in &splits {
        let name = format!("{}.mmeb", split.split_name);
        write_split(split, &a.out.join(&name))?;
        files.push(name);
    }
    write_json(
        &a.out.join(SIDECAR_FILE),
        &SyntheticSidecar {
            kind,
            sizes,
            dim_image: a.dim_image,
            dim_text: a.dim_text,
            seed: a.seed,
            files,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    eprintln!(
        "wrote {kind} data ({}/{}/{}) to {}",
        sizes.train,
        sizes.validation,
        sizes.test,
        a.out.display()
    );
    Ok(exit::OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub split: SplitName,
    pub path: String,
    pub crc32: u32,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub model_file: String,
    pub history: TrainHistory,
    pub metrics: MetricsReport,
}

/// Everything needed to repeat a `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub variant: VariantSpec,
    pub train: TrainConfig,
    pub task_id: u8,
    pub dataset: Vec<DatasetSource>,
    pub runs: Vec<RunRecord>,
    pub mean: MeanMetrics,
    pub wall_clock_seconds: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_JSON_FILE: &str = "ablation.json";

pub fn model_file_name(run: usize) -> String {
    format!("model_run{run}.fusn")
}

fn dataset_sources(dataset: &Dataset) -> Vec<DatasetSource> {
    dataset
        .sources
        .iter()
        .map(|(split, path, crc)| DatasetSource {
            split: *split,
            path: path.display().to_string(),
            crc32: *crc,
            records: dataset.split(*split).len(),
        })
        .collect()
}

fn csv_text(rows: impl IntoIterator<Item = String>) -> String {
    let mut text = String::from(metrics::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    text
}

fn run_variant(spec: &VariantSpec, cfg: &TrainConfig, dataset: &Dataset) -> Result<MultiRunOutcome> {
    multi_run(spec, cfg, &dataset.train, &dataset.validation, &dataset.test)
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let name: VariantName = a.variant.parse()?;
    let cfg = a.hyper.train_config();
    cfg.validate()?;
    let dataset = load_dataset_dir(&a.data)?;
    let spec = a.hyper.variant_spec(name, &dataset)?;

    let started = Instant::now();
    let outcome = run_variant(&spec, &cfg, &dataset)?;
    let wall_clock_seconds = started.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)?;
    let mut runs = Vec::with_capacity(outcome.runs.len());
    for (i, (run, report)) in outcome.runs.iter().zip(&outcome.report.runs).enumerate() {
        let file = model_file_name(i);
        save_model(&run.model, &a.out.join(&file))?;
        eprintln!(
            "{name} run {i} (seed {}): best epoch {}, test accuracy {:.4}",
            run.seed, run.history.best_epoch, report.accuracy
        );
        runs.push(RunRecord {
            run: i,
            seed: run.seed,
            model_file: file,
            history: run.history.clone(),
            metrics: report.clone(),
        });
    }
    let task_id = dataset.train.task_id;
    write_json(&a.out.join(METRICS_JSON_FILE), &outcome.report)?;
    write_atomic(
        &a.out.join(METRICS_CSV_FILE),
        csv_text(metrics::csv_rows(name.as_str(), task_id, &outcome.report)).as_bytes(),
    )?;
    write_json(
        &a.out.join(MANIFEST_FILE),
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            variant: spec,
            train: cfg,
            task_id,
            dataset: dataset_sources(&dataset),
            runs,
            mean: outcome.report.mean.clone(),
            wall_clock_seconds,
        },
    )?;
    Ok(exit::OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let split_name: SplitName = a.split.parse()?;
    let model = load_model(&a.model)?;
    let dataset = load_dataset_dir(&a.data)?;
    let split = dataset.split(split_name);
    let spec = model.spec();
    if (spec.dim_image, spec.dim_text, spec.num_classes) != (split.dim_image, split.dim_text, split.num_classes) {
        return Err(Error::Dimension(format!(
            "model expects widths {}/{} and {} classes, `{split_name}` split has {}/{} and {}",
            spec.dim_image, spec.dim_text, spec.num_classes, split.dim_image, split.dim_text, split.num_classes
        )));
    }
    let report = evaluate(&model, split)?;
    print_json(&report)?;
    Ok(exit::OK)
}

/// Parses `all` or a comma-separated list, keeping registry order and
/// dropping duplicates.
pub fn parse_variant_list(list: &str) -> Result<Vec<VariantName>> {
    if list.trim() == "all" {
        return Ok(VariantName::ALL.to_vec());
    }
    let mut wanted = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        wanted.push(item.parse::<VariantName>()?);
    }
    if wanted.is_empty() {
        return Err(Error::InvalidConfig("--variants is empty".into()));
    }
    Ok(VariantName::ALL.into_iter().filter(|v| wanted.contains(v)).collect())
}

/// Worker count for the ablation sweep: `FUSIONETTE_THREADS` if set to a
/// positive integer, otherwise one per variant.
pub fn ablation_threads(n_variants: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(n_variants.max(1)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: VariantName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<VariantSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<metrics::MultiRunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub tool_version: String,
    pub train: TrainConfig,
    pub task_id: u8,
    pub dataset: Vec<DatasetSource>,
    pub variants: Vec<AblationEntry>,
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let variants = parse_variant_list(&a.variants)?;
    let cfg = a.hyper.train_config();
    cfg.validate()?;
    let threads = ablation_threads(variants.len())?;
    let dataset = load_dataset_dir(&a.data)?;
    let task_id = dataset.train.task_id;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(VariantName, Result<(VariantSpec, MultiRunOutcome)>)> = pool.install(|| {
        use rayon::prelude::*;
        variants
            .par_iter()
            .map(|&name| {
                let result = a
                    .hyper
                    .variant_spec(name, &dataset)
                    .and_then(|spec| run_variant(&spec, &cfg, &dataset).map(|o| (spec, o)));
                (name, result)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut failed = 0;
    for (name, result) in results {
        match result {
            Ok((spec, outcome)) => {
                eprintln!("{name}: mean test accuracy {:.4}", outcome.report.mean.accuracy);
                rows.extend(metrics::csv_rows(name.as_str(), task_id, &outcome.report));
                entries.push(AblationEntry {
                    variant: name,
                    spec: Some(spec),
                    report: Some(outcome.report),
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("{name}: failed: {e}");
                failed += 1;
                entries.push(AblationEntry {
                    variant: name,
                    spec: None,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join(ABLATION_CSV_FILE), csv_text(rows).as_bytes())?;
    write_json(
        &a.out.join(ABLATION_JSON_FILE),
        &AblationSummary {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            train: cfg,
            task_id,
            dataset: dataset_sources(&dataset),
            variants: entries,
        },
    )?;
    Ok(if failed > 0 { exit::PARTIAL_FAILURE } else { exit::OK })
}

pub fn cmd_counts(a: &CountsArgs) -> Result<i32> {
    let expected = Table1Row::for_task(a.task)
        .ok_or_else(|| Error::InvalidConfig(format!("no reference counts for task {}", a.task)))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mmeb"))
        .collect();
    paths.sort();
    let summaries = paths.iter().map(|p| read_split_header(p)).collect::<Result<Vec<_>>>()?;
    let report = validate_counts(&summaries, expected);
    print_json(&report)?;
    Ok(if report.pass { exit::OK } else { exit::COUNT_MISMATCH })
}
