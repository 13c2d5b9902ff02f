mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "btotvc", version, about = "Bayesian tensor-on-tensor regression with voxel-wise GP coefficients")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity: repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the model configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// TOML model configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Total MCMC iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in: a fraction below 1, or an iteration count.
    #[arg(long)]
    burnin: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    /// Patch side length h (odd).
    #[arg(long)]
    patch: Option<usize>,
    /// Share of subjects that must cover a voxel for it to join the group mask.
    #[arg(long)]
    tau_mask: Option<f64>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        /// Scenario code such as 1.a.i (scenario.strategy.construction).
        code: String,
        #[arg(long, value_delimiter = ',', default_value = "8,8,8")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
        /// Residual standard deviation.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Rank of the CP construction.
        #[arg(long, default_value_t = 2)]
        true_rank: usize,
        /// Also draw a nonzero intercept tensor.
        #[arg(long)]
        intercept: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler and write a chain file.
    Fit {
        data: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        out: PathBuf,
        /// Write the chain file every this many iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from an earlier chain file instead of starting afresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the test subjects of a dataset from a fitted chain.
    Predict {
        data: PathBuf,
        chain: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        max_states: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Fit each rank and report DIC.
    SelectRank {
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        ranks: Vec<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geweke diagnostics, traces and acceptance rates of a chain.
    Diagnose {
        chain: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise metrics files from several prediction runs.
    Report {
        /// metrics.json files or prediction directories.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<btotvc::Error>())
                .map_or(1, btotvc::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
