//! Thin command-line front end; all logic lives in the library's `cli`
//! module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mango::cli;

#[derive(Parser)]
#[command(name = "mango", version, about = "Multimodal attention-based normalizing flows")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invertibility and log-det audit suite.
    Verify {
        /// Seeds per audit configuration.
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        /// Corrupt one analytic log-det as a negative control.
        #[arg(long)]
        inject_fault: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset container and print its content hash.
    GenData {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file; writes checkpoint + metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file's held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw prior samples through the inverse flow into a container.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured model grids over seeds and write a CSV summary.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Export one attention matrix (CSV + sidecar JSON) from a checkpoint.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Verify {
            seeds,
            inject_fault,
            out,
        } => cli::cmd_verify(seeds, inject_fault, out.as_deref()),
        Command::GenData {
            name,
            seed,
            size,
            out,
        } => cli::cmd_gen_data(&name, seed, size, &out),
        Command::Train { config, out } => cli::cmd_train(&config, &out),
        Command::Eval { ckpt, data } => cli::cmd_eval(&ckpt, &data),
        Command::Sample {
            ckpt,
            count,
            seed,
            out,
        } => cli::cmd_sample(&ckpt, count, seed, &out),
        Command::Compare { config, out } => cli::cmd_compare(&config, &out),
        Command::ExportAttention {
            ckpt,
            data,
            layer,
            out,
        } => cli::cmd_export_attention(&ckpt, &data, layer, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
