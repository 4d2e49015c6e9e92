//! `crackcnn`: train, fine-tune, evaluate and run the crack-detection CNN.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod report;

#[derive(Parser, Debug)]
#[command(name = "crackcnn", version, about, long_about = None)]
struct Cli {
    /// Worker threads for data loading and per-sample passes. Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded run that records zero wall-clock time in the metrics,
    /// so repeated runs produce byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network from scratch on a directory-per-class dataset.
    Train(TrainArgs),
    /// Replace the output layer of a trained model and fine-tune it.
    Transfer(TransferArgs),
    /// Loss and accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Class probabilities for one image.
    Predict(PredictArgs),
    /// Write a synthetic dataset of crack-like images.
    Synth(SynthArgs),
    /// Print layer sizes and parameter counts.
    Params(ParamsArgs),
    /// Finite-difference check of every backward pass.
    VerifyGrads(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Options shared by `train` and `transfer`.
#[derive(Args, Debug)]
struct TrainingOptions {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    data: PathBuf,
    /// Number of classes; must match the subdirectory count.
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of every class held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Steps between metrics rows; the final step is always recorded.
    #[arg(long, default_value_t = 50)]
    eval_interval: usize,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Also write the optimizer state next to the checkpoint (`.adam`).
    #[arg(long)]
    save_optimizer: bool,
    /// Print the first recorded step whose training accuracy reaches this
    /// value.
    #[arg(long, value_name = "ACC")]
    report_steps_to: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainingOptions,
    /// Local response normalization after each convolution block.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    lrn: Switch,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    base: PathBuf,
    #[command(flatten)]
    opts: TrainingOptions,
    /// Keep both convolution layers fixed.
    #[arg(long)]
    freeze_conv: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `crack2` or `crackjoint3`.
    #[arg(long)]
    task: crackcnn::data::SynthTask,
    /// Images per class.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    lrn: Switch,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: corrupt the convolution gradient so the check fails.
    #[arg(long, hide = true)]
    corrupt_conv: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }

    match commands::run(cli.command, cli.deterministic) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
