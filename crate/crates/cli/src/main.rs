//! `sbnn`: train, quantize, evaluate, benchmark and inspect sparse binary
//! networks.
//!
//! Exit codes: 0 success, 1 i/o, 2 configuration, 3 data, 4 training
//! divergence, 5 model or snapshot file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DataFlags, TrainFlags};

#[derive(Debug)]
pub enum Failure {
    Io(String),
    Config(String),
    Data(String),
    Diverged(String),
    ModelFile(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::ModelFile(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Data(m) | Failure::Diverged(m) | Failure::ModelFile(m) => m,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sbnn", version, about = "Sparse binary neural networks: train, quantize, run and measure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Dataset file (CIFAR-10 binary batch or IDX images).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset format: cifar | idx.
    #[arg(long)]
    format: Option<String>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use the seeded synthetic dataset instead of a file.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Synthetic class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic noise level.
    #[arg(long)]
    difficulty: Option<f64>,
}

impl From<&DataArgs> for DataFlags {
    fn from(a: &DataArgs) -> Self {
        DataFlags {
            data: a.data.clone(),
            format: a.format.clone(),
            labels: a.labels.clone(),
            synthetic: a.synthetic,
            samples: a.samples,
            classes: a.classes,
            difficulty: a.difficulty,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the desk network and write the log, resolved config and snapshot.
    Train {
        /// TOML config file; flags override its keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Penalty share of the total loss, in [0, 1).
        #[arg(long)]
        gamma: Option<f64>,
        /// Target sparsity s; EC = 1 - s.
        #[arg(long)]
        sparsity: Option<f64>,
        /// Target bits per weight; EC = h^-1(hstar).
        #[arg(long)]
        hstar: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// analytic | learned | pm1
        #[arg(long)]
        omega: Option<String>,
        /// Channel width of the desk network.
        #[arg(long)]
        width: Option<usize>,
        /// Random flips and shifts during training.
        #[arg(long)]
        augment: bool,
        /// Output directory.
        #[arg(long, default_value = "sbnn-out")]
        out: PathBuf,
    },
    /// Convert a training snapshot into a model file.
    Quantize {
        #[arg(long)]
        snapshot: PathBuf,
        /// analytic | learned | pm1; defaults to the snapshot's training mode.
        #[arg(long)]
        omega: Option<String>,
        #[arg(long, default_value = "model.sbnn")]
        out: PathBuf,
    },
    /// Accuracy of the packed engine and its agreement with the float reference.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Operation counts, pruning ratios and throughput of the packed engine.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random inputs to run when no data is given.
        #[arg(long, default_value_t = 64)]
        inputs: usize,
        /// Directory for report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer domain, ones fraction, entropy and kernel histogram.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        /// Directory for histogram.csv; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            epochs,
            batch,
            lr,
            gamma,
            sparsity,
            hstar,
            seed,
            omega,
            width,
            augment,
            out,
        } => {
            let file = config::FileConfig::load(config.as_deref())?;
            let flags = TrainFlags { epochs, batch, lr, gamma, sparsity, hstar, seed, omega, width, augment };
            let resolved = config::resolve_train(&flags, &DataFlags::from(&data), &file)?;
            commands::train(&resolved, &out)
        }
        Command::Quantize { snapshot, omega, out } => commands::quantize(&snapshot, omega.as_deref(), &out),
        Command::Eval { model, config, data, seed } => {
            let file = config::FileConfig::load(config.as_deref())?;
            let source = config::resolve_data(&DataFlags::from(&data), &file, seed)?
                .ok_or_else(|| Failure::Config("no data: give --data <path> or --synthetic".into()))?;
            commands::eval(&model, &source)
        }
        Command::Bench { model, config, data, seed, inputs, out } => {
            let file = config::FileConfig::load(config.as_deref())?;
            let source = config::resolve_data(&DataFlags::from(&data), &file, seed)?;
            commands::bench(&model, source.as_ref(), seed, inputs, out.as_deref())
        }
        Command::Inspect { model, out } => commands::inspect(&model, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
