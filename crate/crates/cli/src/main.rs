mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scg_breath::{Error, LabelClass, PipelineConfig, RecordFormat};

/// Breathing-state identification from seismocardiogram (SCG) and ECG recordings.
///
/// Stages can be run one at a time (synth, detect, extract, train,
/// classify, evaluate) or all together (pipeline). Exit status is 0 on
/// success, 1 when a stage fails and 2 for usage, configuration or
/// missing-input errors.
#[derive(Debug, Parser)]
#[command(name = "scg-breath", version)]
pub struct Cli {
    /// TOML or JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Emit logs as line-delimited JSON on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,

    /// Worker threads for record- and fold-level parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic ECG/SCG records with ground-truth AO annotations.
    Synth(SynthArgs),
    /// Detect AO instants in one record; writes one sample index per line.
    Detect(DetectArgs),
    /// Extract the 15 per-beat features from records into a feature CSV.
    Extract(ExtractArgs),
    /// Train the stacked sparse autoencoder classifier on a feature CSV.
    Train(TrainArgs),
    /// Classify the rows of a feature CSV with a trained model.
    Classify(ClassifyArgs),
    /// k-fold cross-validation with metrics, ROC curves and a kNN baseline.
    Evaluate(EvaluateArgs),
    /// Run every stage on a generated corpus and write all artifacts.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassChoice {
    One(LabelClass),
    All,
}

fn parse_class(s: &str) -> Result<ClassChoice, String> {
    if s.eq_ignore_ascii_case("all") {
        Ok(ClassChoice::All)
    } else {
        s.parse().map(ClassChoice::One).map_err(|e: Error| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Random seed; falls back to SCG_BREATH_SEED, then the config file.
    #[arg(long, env = "SCG_BREATH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Breathing class to generate: SB, NB, LB or all.
    #[arg(long, default_value = "all", value_parser = parse_class)]
    pub class: ClassChoice,
    /// Number of subjects.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Record duration in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Sampling rate in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// SCG signal-to-noise ratio in dB.
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Record file format: csv or json.
    #[arg(long, default_value = "csv")]
    pub format: RecordFormat,
    /// Output directory (default: <out_dir>/records from the config).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Record file (.csv or .json).
    #[arg(long)]
    pub input: PathBuf,
    /// Width of the Gaussian derivative kernel in milliseconds.
    #[arg(long)]
    pub sigma_ms: Option<f64>,
    /// Minimum spacing between AO instants in milliseconds.
    #[arg(long)]
    pub refractory_ms: Option<f64>,
    /// Number of ECG delay taps spanning the subspace.
    #[arg(long)]
    pub delays: Option<usize>,
    /// Annotation output (default: <input>.detected.ann).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Record file, or a directory whose .csv/.json records are all used.
    #[arg(long)]
    pub input: PathBuf,
    /// AO annotation file for a single input record; detection runs when omitted.
    #[arg(long)]
    pub ann: Option<PathBuf>,
    /// Feature CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Autocorrelation lag in samples (default: beat length / 4).
    #[arg(long)]
    pub lag: Option<usize>,
    /// Beat delay for the circular difference features.
    #[arg(long)]
    pub delay_d: Option<usize>,
    /// Samples per interpolated beat.
    #[arg(long)]
    pub beat_length: Option<usize>,
}

fn parse_sparsity(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated values, e.g. 0.5,0.35")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled feature CSV.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Model output (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Weight-decay coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sparsity penalty weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Target mean activations of the two hidden layers, e.g. 0.5,0.35.
    #[arg(long, value_parser = parse_sparsity)]
    pub sparsity: Option<(f64, f64)>,
    /// Epochs for each pretraining stage and for the softmax layer.
    #[arg(long)]
    pub epochs_pretrain: Option<usize>,
    /// Epochs of supervised fine-tuning.
    #[arg(long)]
    pub epochs_finetune: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Feature CSV to classify; labels are optional.
    #[arg(long)]
    pub features: PathBuf,
    /// Prediction CSV output: record_id,predicted,p_SB,p_NB,p_LB.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Labeled feature CSV (default: <out_dir>/features.csv).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Number of folds.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Report output (default: <out_dir>/report.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ROC point CSV output.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Baseline classifier run on the same folds: knn or none.
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Fold assignment: beat (stratified) or subject.
    #[arg(long)]
    pub split: Option<scg_breath::SplitMode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Knn,
    None,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Directory for all artifacts.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

/// Exit status for a failed run.
fn exit_code(err: &Error) -> u8 {
    let missing_input = match err {
        Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        Error::Stage { source, .. } => matches!(source.as_ref(), Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound),
        _ => false,
    };
    if err.is_usage() || missing_input {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> scg_breath::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let base = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    commands::dispatch(cli.command, base)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_json);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "run failed");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
