mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracelab_core::distill::Method;

/// Bridge-posterior score distillation experiments on analytic toy priors.
#[derive(Debug, Parser)]
#[command(name = "tracelab", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Every file is written below this directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the self-check suite; exit status 0 iff every check passes.
    Verify {
        /// Perturb the bridge γ before the moment checks (fault injection).
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_gamma_offset: f64,
    },
    /// Train the noise-prediction network by denoising score matching.
    TrainScore,
    /// One distillation run with renders and gradient dumps.
    Distill {
        #[arg(long, default_value = "trace")]
        method: Method,
    },
    /// Cross product of methods, guidance weights and seeds.
    Sweep {
        #[arg(long = "method", value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        cfg_weights: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Canvas-space gradient statistics of both methods at the initial state.
    DumpGradients,
    /// Line plot of a sweep CSV or a run JSONL file.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
