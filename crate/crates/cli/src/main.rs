//! `tetnp`: generate task caches, train, evaluate and verify.
//!
//! Exit status is 0 on success, 1 when a run or a verification suite fails,
//! and 2 for usage errors (bad flags or an invalid config).

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use tetnp::models::Variant;
use tetnp::verify::{Mutation, Suite};

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "tetnp", version, about = "Translation-equivariant transformer neural processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides both the training seed and the task sampler seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the model variant.
    #[arg(long, value_name = "TAG")]
    pub variant: Option<Variant>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an evaluation task cache and print its config hash.
    GenTasks {
        #[command(flatten)]
        common: Common,
        /// Number of tasks (defaults to run.tasks).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model, writing a checkpoint and a loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score checkpoints on the task cache under a grid of input shifts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Shifts to evaluate, e.g. 0,0.5,1.
        #[arg(long, value_name = "A,B,C", value_delimiter = ',', allow_negative_numbers = true)]
        delta_grid: Option<Vec<f64>>,
        /// Checkpoints to evaluate (defaults to the configured checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
        /// Add rows for the exact GP predictive.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the property suites and print a JSON report.
    Verify {
        /// Run only this suite.
        #[arg(long, value_name = "NAME")]
        scope: Option<Suite>,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Random tasks per model.
        #[arg(long, value_name = "N")]
        tasks: Option<usize>,
        /// Inject a known defect to check that the suites notice it.
        #[arg(long, value_name = "NAME")]
        mutation: Option<Mutation>,
        /// Also write the JSON report here.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::GenTasks { common, count } => commands::gen_tasks(&common, count),
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::Eval {
            common,
            delta_grid,
            checkpoint,
            oracle,
        } => commands::eval(&common, delta_grid, checkpoint, oracle),
        Command::Verify {
            scope,
            seed,
            tasks,
            mutation,
            report,
        } => commands::verify(scope, seed, tasks, mutation, report),
        Command::Config { common } => commands::show_config(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
