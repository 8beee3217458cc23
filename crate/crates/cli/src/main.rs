//! `asda`: split corpora, build skill libraries, refine them and evaluate
//! students with skill injection.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "asda",
    version,
    about = "Skill distillation and refinement for black-box LLM students"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every model-calling command.
#[derive(Debug, Clone, Args)]
pub struct RunOptions {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rules file that backs every role with the scripted mock.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// JSON table used as the program executor.
    #[arg(long)]
    pub pot_stub: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skill selection mode: bundle or per_file.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tau_cov: Option<f64>,
    #[arg(long)]
    pub tau_safe: Option<f64>,
    #[arg(long)]
    pub n_max: Option<u32>,
    #[arg(long)]
    pub iterations: Option<u32>,
    /// Run directory for all outputs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, propagate context and split a corpus into train/test files.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "en")]
        language: String,
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the initial library from baseline failures on a training file.
    Warmup {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Refine a library against a training file.
    Refine {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Evaluate a test file, optionally with a library and a baseline.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        /// Also evaluate without skills and report the delta.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        run: RunOptions,
    },
    /// Print a summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Split {
            corpus,
            language,
            train_fraction,
            seed,
            out,
        } => commands::split(&corpus, &language, train_fraction, seed, &out),
        Command::Warmup { train, run } => commands::warmup(&train, &run),
        Command::Refine {
            library,
            train,
            run,
        } => commands::refine(&library, &train, &run),
        Command::Eval {
            test,
            library,
            baseline,
            run,
        } => commands::eval(&test, library.as_deref(), baseline, &run),
        Command::Report { run } => commands::report(&run).map(|text| print!("{text}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
