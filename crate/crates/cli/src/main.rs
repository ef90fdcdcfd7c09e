mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hatnet::network::GridSchedule;

#[derive(Parser, Debug)]
#[command(
    name = "hatnet",
    version,
    about = "HAT-Net backbones: structure, cost, gradients and toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the stage layout and parameter total of a network.
    Describe(ModelArgs),
    /// Per-layer parameter and FLOP counts as CSV, then a total line.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Run one seeded random batch and summarize the logits.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights file to load instead of seeded initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Compare backward gradients with central differences on a small network.
    Gradcheck {
        /// Custom network (JSON); defaults to the built-in gradient-check network.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        input_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Minimum number of sampled coordinates.
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Train the reduced network on synthetic shapes.
    TrainToy(TrainArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// tiny, small, medium or large.
    #[arg(long, conflicts_with = "config")]
    pub variant: Option<String>,
    /// Custom network configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid schedule for the hierarchical stages [default: classification].
    #[arg(long, value_enum)]
    pub grids: Option<Grids>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Where to write the final weights.
    #[arg(long, default_value = "toy.hatw")]
    pub out: PathBuf,
    /// Where to write the `step,loss,train_acc` CSV.
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grids {
    Classification,
    Dense,
}

impl From<Grids> for GridSchedule {
    fn from(g: Grids) -> Self {
        match g {
            Grids::Classification => GridSchedule::Classification,
            Grids::Dense => GridSchedule::Dense,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Describe(m) => commands::describe(&m),
        Command::Flops { model, batch } => commands::flops(&model, batch),
        Command::Forward {
            model,
            weights,
            batch,
        } => commands::forward(&model, weights.as_deref(), batch),
        Command::Gradcheck {
            config,
            input_size,
            seed,
            eps,
            tol,
            coords,
        } => commands::gradcheck(config.as_deref(), input_size, seed, eps, tol, coords),
        Command::TrainToy(t) => commands::train_toy(&t),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
