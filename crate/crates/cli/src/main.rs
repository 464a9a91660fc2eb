//! `pefnet`: train, evaluate and run PEFNet segmentation models.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "pefnet",
    version,
    about = "PEFNet polyp segmentation: train, evaluate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, metrics and the resolved config.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the predicted mask of one image as a 0/255 PNG.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic image/mask dataset.
    Synth(SynthArgs),
    /// Print parameter counts per module.
    Summary(SummaryArgs),
}

/// Settings shared with config files; every flag is optional so that a
/// `--config` value is only overridden when the flag is given.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on N synthetic samples instead of --data.
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
    /// Square training resolution; must be divisible by 32 [default: 64].
    #[arg(long)]
    img_size: Option<usize>,
    /// toy, tiny, small or base [default: toy].
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated odd kernel sizes of the MPE block [default: 1,3,5,7].
    #[arg(long)]
    mkcnn_kernels: Option<String>,
    /// Skip fusion: add or concat [default: add].
    #[arg(long)]
    fusion: Option<String>,
    /// Plain skip connections without the MPE block.
    #[arg(long)]
    no_mpe: bool,
    /// Jaccard loss smoothing factor [default: 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Peak learning rate of the cosine schedule [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Final learning rate of the cosine schedule [default: 0].
    #[arg(long)]
    eta_min: Option<f64>,
    /// [default: 40]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 4].
    #[arg(long)]
    batch: Option<usize>,
    /// Seed of every random choice in the run [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/latest].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probability cut-off for masks [default: 0.5].
    #[arg(long)]
    threshold: Option<f64>,
    /// Train,val,test fractions [default: 0.6,0.2,0.2].
    #[arg(long)]
    split: Option<String>,
    /// Disable data augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs; the schedule still spans --epochs.
    #[arg(long, value_name = "K")]
    max_epochs_this_run: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate N synthetic samples (seeded by --seed).
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resolution to evaluate at [default: the checkpoint's].
    #[arg(long)]
    img_size: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the per-sample CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score ground-truth masks against themselves (no checkpoint needed).
    #[arg(long)]
    self_test: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Fewer network probes (200) for a fast run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Network parameter probes [default: 200 with --quick, else 1000].
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SummaryArgs {
    /// Preset to detail; all presets are totalled when omitted.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    mkcnn_kernels: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    no_mpe: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Summary(a) => commands::summary(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
