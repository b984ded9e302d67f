mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompareArgs, ConditionArgs, FitArgs, GenerateArgs, ScoreArgs};
use config::Config;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  2  input error (bad flag, unreadable or malformed CSV, unknown column)
  3  fit failure
  4  conditioning failure (e.g. degenerate conditioning point)
  5  model file format error (unknown format_version, malformed JSON)

Config file (--config-file): one `key = value` per line, keys are long flag
names without dashes (seed, threads, k, family, ...), `#` starts a comment.
Flags given on the command line take precedence over the file.";

#[derive(Parser)]
#[command(
    name = "metacond",
    version,
    about = "Fit meta distributions and sample their exact conditionals",
    after_help = AFTER_HELP
)]
struct Cli {
    /// Master random seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Key-value run file
    #[arg(long = "config-file", global = true, value_name = "FILE")]
    config_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a meta model to a CSV file and save it as JSON
    Fit(FitArgs),
    /// Sample or evaluate the conditional law of a saved model
    Condition(ConditionArgs),
    /// Score conditional samplers on random train/test splits
    Score(ScoreArgs),
    /// Compare the AD, FD and PEM copula fitters on synthetic data
    CompareFitters(CompareArgs),
    /// Write a synthetic data set
    Generate(GenerateArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn fit(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn condition(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self { code: 5, message: message.into() }
    }
}

/// Settings shared by every command.
pub struct Global {
    pub seed: u64,
    pub config: Config,
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("warning: {}", r.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config_file {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = config.pick_or(cli.seed, "seed", 0)?;
    if let Some(t) = config.pick(cli.threads, "threads")? {
        if t == 0 {
            return Err(CliError::input("threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::input(format!("cannot configure threads: {e}")))?;
    }
    let g = Global { seed, config };
    match cli.command {
        Command::Fit(a) => commands::fit(a, &g),
        Command::Condition(a) => commands::condition(a, &g),
        Command::Score(a) => commands::score(a, &g),
        Command::CompareFitters(a) => commands::compare_fitters(a, &g),
        Command::Generate(a) => commands::generate(a, &g),
    }
}

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(log::LevelFilter::Warn));
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
