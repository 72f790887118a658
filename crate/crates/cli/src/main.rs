mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{EvalArgs, ExtendArgs, GenDataArgs, RolloutArgs, TrainArgs};
use poumor::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "poumor", about = "partition-of-unity mixture-of-regressors operators", version)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a dataset directory from a named generator
    GenData {
        /// TOML config file ([data] section)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Generator kind (overrides config)
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid points per axis
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        snapshots: Option<usize>,
        /// Also store fine/filtered snapshot series
        #[arg(long)]
        keep_fine: bool,
    },
    /// Fit a model on a dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint + metrics.csv
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// "least-squares" or "elbo"
        #[arg(long)]
        objective: Option<String>,
        /// Write a checkpoint every N steps (0 = only at the end)
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Score a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset split to score
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Autoregressive rollout from validation initial conditions
    Rollout {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Seminorm-minimizing extension of a masked field, with spectral diagnostics
    Extend {
        /// Dataset directory holding masked samples
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Raw field file (alternative to --data)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Raw mask file (with --input)
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Box side length for raw inputs
        #[arg(long, default_value_t = 2.5)]
        len: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        cg_tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        constraint_tol: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Fourier-basis Jacobi preconditioning of the CG solve
        #[arg(long)]
        precondition: bool,
        /// Cutoff shell for the spectral ringing metric (default n/4)
        #[arg(long)]
        gibbs_shell: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_) | Error::Shape { .. } | Error::Format(_) => 2,
        Error::Numerical(_) | Error::NotConverged { .. } => 3,
        Error::Io(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::GenData {
            config,
            out,
            kind,
            count,
            val_count,
            seed,
            n,
            snapshots,
            keep_fine,
        } => commands::cmd_gen_data(&GenDataArgs {
            config,
            out,
            kind,
            count,
            val_count,
            seed,
            n,
            snapshots,
            keep_fine,
        }),
        Commands::Train {
            config,
            data,
            out,
            resume,
            epochs,
            lr,
            seed,
            max_steps,
            objective,
            checkpoint_every,
        } => commands::cmd_train(&TrainArgs {
            config,
            data,
            out,
            resume,
            epochs,
            lr,
            seed,
            max_steps,
            objective,
            checkpoint_every,
        }),
        Commands::Eval {
            data,
            checkpoint,
            out,
            split,
        } => commands::cmd_eval(&EvalArgs {
            data,
            checkpoint,
            out,
            split,
        }),
        Commands::Rollout {
            config,
            data,
            checkpoint,
            out,
            steps,
            samples,
            seed,
        } => commands::cmd_rollout(&RolloutArgs {
            config,
            data,
            checkpoint,
            out,
            steps,
            samples,
            seed,
        }),
        Commands::Extend {
            data,
            split,
            index,
            input,
            mask,
            len,
            out,
            cg_tol,
            constraint_tol,
            max_iters,
            precondition,
            gibbs_shell,
        } => commands::cmd_extend(&ExtendArgs {
            data,
            split,
            index,
            input,
            mask,
            len,
            out,
            cg_tol,
            constraint_tol,
            max_iters,
            precondition,
            gibbs_shell,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
