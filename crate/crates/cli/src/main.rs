mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;
use tvseg::losses::LossPreset;
use tvseg::synth::Split;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "TVSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tvseg", version, about = "Synthetic 3D lesion segmentation with Dice, BCE and TV losses")]
struct Cli {
    /// Worker threads; 1 gives the single-threaded reference behaviour.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Train one loss preset and write checkpoints and the epoch log.
    Train(TrainArgs),
    /// Sliding-window inference: probability volumes and thresholded masks.
    Predict(PredictArgs),
    /// Opening, hole filling and small-cluster removal on mask files.
    Postproc(PostprocArgs),
    /// Evaluate masks against ground truth and print the metric table.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every preset over several seeds and report before and after post-processing.
    ReproTrend(TrendArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides `gen.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum LossArg {
    Dice,
    #[value(alias = "dice-bce")]
    DiceBce,
    #[value(alias = "dice-tv")]
    DiceTv,
}

impl From<LossArg> for LossPreset {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Dice => LossPreset::Dice,
            LossArg::DiceBce => LossPreset::DiceBce,
            LossArg::DiceTv => LossPreset::DiceTv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    loss: LossArg,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in total (the run can be resumed later).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Supplies the inference settings and the expected network.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PostprocArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the pipeline a second time on its output and report differing voxels.
    #[arg(long)]
    check_idempotence: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted masks, one per run.
    #[arg(long, required_unless_present = "runs")]
    pred: Vec<PathBuf>,
    /// Additional run directories aggregated with `--pred`.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Dataset directory or directory of reference masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "run")]
    label: String,
    /// Mark the row as post-processed.
    #[arg(long)]
    postprocessed: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    TvSign,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "double")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random volumes per loss.
    #[arg(long, default_value_t = 20)]
    volumes: usize,
    /// Skip the per-tensor network check.
    #[arg(long)]
    losses_only: bool,
    /// Check at most this many entries per parameter tensor.
    #[arg(long)]
    max_entries: Option<usize>,
    #[arg(long, value_enum, default_value = "none", hide = true)]
    inject_fault: FaultArg,
}

#[derive(Debug, Args)]
struct TrendArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training seeds 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["dice", "dice_bce", "dice_tv"])]
    presets: Vec<LossArg>,
    #[arg(long)]
    force: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        commands::init_threads(n)?;
    }
    match cli.command {
        Command::Gen(a) => commands::gen(a.config.as_deref(), &a.out_dir, a.seed, a.force),
        Command::Train(a) => commands::train(&commands::TrainOptions {
            config: a.config,
            data: a.data,
            out: a.out,
            preset: a.loss.into(),
            seed: a.seed,
            resume: a.resume,
            epochs: a.epochs,
        }),
        Command::Predict(a) => commands::predict(&a.ckpt, &a.data, a.split.into(), &a.out, a.config.as_deref()),
        Command::Postproc(a) => commands::postproc(&a.input, &a.out, a.config.as_deref(), a.check_idempotence),
        Command::Eval(a) => {
            let runs: Vec<PathBuf> = a.pred.into_iter().chain(a.runs).collect();
            commands::eval(&runs, &a.gt, a.split.into(), &a.out, &a.label, a.postprocessed)
        }
        Command::Gradcheck(a) => {
            let precision = match a.precision {
                PrecisionArg::Single => tvseg::gradcheck::Precision::Single,
                PrecisionArg::Double => tvseg::gradcheck::Precision::Double,
            };
            let fault = match a.inject_fault {
                FaultArg::None => tvseg::gradcheck::Fault::None,
                FaultArg::TvSign => tvseg::gradcheck::Fault::TvSignFlip,
            };
            let cfg = tvseg::gradcheck::GradcheckConfig {
                precision,
                seed: a.seed,
                volumes: a.volumes,
                max_entries_per_tensor: a.max_entries,
                fault,
                ..Default::default()
            };
            commands::gradcheck(&cfg, !a.losses_only)
        }
        Command::ReproTrend(a) => {
            let presets = a.presets.into_iter().map(LossPreset::from).collect();
            commands::repro_trend(a.config.as_deref(), &a.out, presets, a.seeds, a.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
