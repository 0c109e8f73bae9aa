use std::path::PathBuf;
use std::process::ExitCode;

use aal_cli::commands::{self, EvalOverrides};
use aal_cli::CliError;
use clap::{Parser, Subcommand};

/// Associative adversarial training experiments.
#[derive(Debug, Parser)]
#[command(name = "aal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, checkpoint.ckpt and config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its test split; prints one JSON line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Perturbation bound for both FGSM and PGD.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        pgd_step_size: Option<f64>,
        #[arg(long)]
        pgd_iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt one op's gradient, as `op` or `op=relative_bias`.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Train once per value of one parameter; writes sweep_<param>.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of xi1, xi2, zeta, epsilon, lr0, seed, kernel.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write M, M-hat and associative-attention PGMs for the first n test samples.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, output_dir } => commands::cmd_train(&config, output_dir.as_deref()),
        Command::Eval {
            checkpoint,
            data_dir,
            epsilon,
            pgd_step_size,
            pgd_iterations,
            batch_size,
        } => {
            let overrides = EvalOverrides {
                epsilon,
                pgd_step_size,
                pgd_iterations,
                batch_size,
            };
            commands::cmd_eval(&checkpoint, data_dir.as_deref(), &overrides)
        }
        Command::Gradcheck { seeds, inject_fault } => commands::cmd_gradcheck(seeds, inject_fault.as_deref()),
        Command::Sweep {
            config,
            param,
            values,
            output_dir,
        } => commands::cmd_sweep(&config, &param, &values, output_dir.as_deref()),
        Command::DumpAttention {
            checkpoint,
            n,
            out,
            data_dir,
        } => {
            let files = commands::cmd_dump_attention(&checkpoint, n, &out, data_dir.as_deref())?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    aal_core::runtime::retain_freed_memory();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
