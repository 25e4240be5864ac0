//! `multiangle` command-line tool.
//!
//! Exit status: 0 on success, 1 on bad input (including usage errors),
//! 2 when the model backend fails.

mod commands;
mod config;
mod repl;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const REMOTE_URL_ENV: &str = "MULTIANGLE_REMOTE_URL";

#[derive(Debug, Parser)]
#[command(name = "multiangle", version, about = "Multi-angle question answering toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for sampling, slot scrambling and explanation building [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Slot order used when encoding [default: as_given]
    #[arg(long, global = true, value_enum)]
    pub order: Option<Order>,
    /// `toy:<pairs-file>` or `remote:<base-url>`
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// TOML file of flag defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Off-path probability mass of the toy backend [default: 0.1]
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Concurrent requests to a remote backend [default: 8]
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Whitespace-token limit applied to remote inputs (tail is cut)
    #[arg(long, global = true)]
    pub max_input_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Order {
    AsGiven,
    Scrambled,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the model input for the given slot values and targets
    Encode(commands::EncodeArgs),
    /// Parse raw model output into slot values
    Parse(commands::ParseArgs),
    /// Write training or evaluation pairs for one or more datasets
    Sample(commands::SampleArgs),
    /// Evaluate a backend over every angle of a dataset
    Eval(commands::EvalArgs),
    /// Rank candidate answers by forced-decoding probability
    Rank(commands::RankArgs),
    /// Answer with an explanation, then answer again given that explanation
    Feedback(commands::FeedbackArgs),
    /// Aggregate a manual score sheet by question category
    Report(commands::ReportArgs),
    /// Interactive query loop
    Repl(repl::ReplArgs),
    /// Start the HTTP service
    Serve(commands::ServeArgs),
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Backend(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Backend(m) => f.write_str(m),
        }
    }
}

impl From<multiangle::Error> for Failure {
    fn from(e: multiangle::Error) -> Self {
        if e.is_backend() {
            Failure::Backend(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = config::Settings::resolve(&cli.global).and_then(|settings| commands::run(cli.command, &settings));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
