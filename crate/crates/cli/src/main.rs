mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use ccspnet::data::{DataError, Phase};
use ccspnet::eval::EvalError;
use ccspnet::model::{Ablation, ModelError};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Config(String),
    /// Missing, unreadable or inconsistent input data (exit 2).
    Data(String),
    /// Numerical failure during fitting or statistics (exit 3).
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ref n if n.is_numerical() => CliError::Numerical(e.to_string()),
            ModelError::SingleClassBatch => CliError::Data(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e.root() {
            EvalError::Data(_) | EvalError::Csv { .. } => CliError::Data(msg),
            EvalError::Model(m) if m.is_numerical() => CliError::Numerical(msg),
            EvalError::Model(ModelError::Config(_)) => CliError::Config(msg),
            EvalError::Model(_) => CliError::Data(msg),
            EvalError::Stats(_) | EvalError::Csp(_) | EvalError::Lda(_) => CliError::Numerical(msg),
            EvalError::Pool(_) | EvalError::Invalid(_) | EvalError::Subject(..) => {
                CliError::Config(msg)
            }
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

const RESULT_CSV_HELP: &str = "\
Outputs in the output directory:
  results.csv   subject_id,approach,ablation,accuracy,seed (accuracy in percent)
  history.csv   subject_id,epoch,batch,csp_loss,fisher,combined
  summary.txt   run summary; the first line holds the only timestamp
  config.toml   resolved configuration
  models/       one subject_NNN.ccsp model per subject

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.";

#[derive(Parser, Debug)]
#[command(
    name = "ccspnet",
    version,
    about = "EEG motor-imagery decoding with trainable spectral filters, CSP and LDA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-class motor-imagery dataset.
    Synth(SynthArgs),
    /// Train and test one model per subject on the subject-dependent split.
    #[command(after_help = RESULT_CSV_HELP)]
    Train(RunArgs),
    /// Subject-dependent evaluation over all selected subjects.
    #[command(after_help = RESULT_CSV_HELP)]
    EvalSd(RunArgs),
    /// Leave-one-subject-out evaluation.
    #[command(after_help = RESULT_CSV_HELP)]
    EvalSi(SiArgs),
    /// Evaluate models with one component removed.
    #[command(after_help = RESULT_CSV_HELP)]
    Ablate(AblateArgs),
    /// Subject-independent accuracy against the number of training subjects.
    #[command(
        after_help = "Writes sweep.csv with columns n_train_subjects,subject_id,accuracy,seed."
    )]
    Sweep(SweepArgs),
    /// Statistical comparison of result files or of the published tables.
    #[command(
        after_help = "Input CSVs use the results.csv schema: subject_id,approach,ablation,accuracy,seed."
    )]
    Stats(StatsArgs),
    /// Time-frequency grids or CSP feature scatter as CSV and SVG.
    #[command(after_help = "\
stft.csv         stage,map,time_s,freq_hz,magnitude
csp_scatter.csv  branch,trial,label,x,y (x, y: first and last log-variance feature of the branch)")]
    Plot(PlotArgs),
    /// Itemized parameter count for a configuration.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    /// Trials per subject, split evenly over classes and the four blocks.
    #[arg(long, default_value_t = 80)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 4.0)]
    snr: f64,
    /// μ-power factor of the desynchronized source; 1 gives inseparable classes.
    #[arg(long, default_value_t = 0.5)]
    erd: f64,
    #[arg(long, default_value_t = 0.1)]
    variability: f64,
    #[arg(long, env = "CCSP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Run configuration (TOML). Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; overrides the configuration.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides CCSP_SEED and the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated subject ids.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<u16>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Offline,
    Online,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Offline => Phase::Offline,
            PhaseArg::Online => Phase::Online,
        }
    }
}

#[derive(Args, Debug)]
struct SiArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training phase pooled from the other subjects.
    #[arg(long, value_enum, default_value_t = PhaseArg::Offline)]
    phase: PhaseArg,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ComponentArg {
    Wkcnn,
    Tcnn,
    Frn,
    Lda,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ApproachArg {
    Sd,
    SiOffline,
    SiOnline,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = ComponentArg::All)]
    component: ComponentArg,
    #[arg(long, value_enum, default_value_t = ApproachArg::Sd)]
    approach: ApproachArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = PhaseArg::Offline)]
    phase: PhaseArg,
    /// Comma-separated training-subject counts.
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Recompute the published comparison from the embedded tables.
    #[arg(long, conflicts_with = "inputs")]
    fixtures: bool,
    /// Result CSVs, one group each.
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("kind").required(true))]
struct PlotArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, group = "kind")]
    stft: bool,
    #[arg(long = "csp-scatter", group = "kind")]
    csp_scatter: bool,
    /// Trained model; required for everything past the raw input.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    subject: u16,
    /// Trial index within the subject (STFT only).
    #[arg(long, default_value_t = 0)]
    trial: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => eval_sd(&a, "train"),
        Command::EvalSd(a) => eval_sd(&a, "eval-sd"),
        Command::EvalSi(a) => eval_si(&a.run, a.phase.into()),
        Command::Ablate(a) => ablate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Stats(a) => stats(&a),
        Command::Plot(a) => plot(&a),
        Command::Params(a) => params(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ccspnet: {e}");
            ExitCode::from(e.code())
        }
    }
}
