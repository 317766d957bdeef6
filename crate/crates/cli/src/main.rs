mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use toolcontract::policy::SelectionMode;

#[derive(Parser)]
#[command(
    name = "toolcontract",
    version,
    about = "Contract-verified tool execution for LLM agents",
    after_help = "Environment (overrides the config file):\n  \
                  TOOLCONTRACT_LLM_URL, TOOLCONTRACT_LLM_MODEL, TOOLCONTRACT_LLM_API_KEY\n  \
                  TOOLCONTRACT_EMBED_URL, TOOLCONTRACT_EMBED_MODEL, TOOLCONTRACT_EMBED_API_KEY\n  \
                  TOOLCONTRACT_RERANK_URL, TOOLCONTRACT_RERANK_MODEL, TOOLCONTRACT_RERANK_API_KEY\n  \
                  TOOLCONTRACT_TOOL_URL\n  \
                  TOOLCONTRACT_LOG (tracing filter, e.g. `info`)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Greedy => SelectionMode::Greedy,
            Mode::Sample => SelectionMode::Sample,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario or a live query. Exit 0 on an answer, 2 on failure, 3 on timeout.
    Run(RunArgs),
    /// Check contract files against tool specs.
    Validate(ValidateArgs),
    /// Re-verify a trajectory log. Exit 0 if safe, 2 on violations.
    Replay(ReplayArgs),
    /// Aggregate rejection counts over trajectory logs.
    Report(ReportArgs),
    /// Write the fault-injection suite as scenario files.
    ExportSuite {
        /// Destination directory.
        dir: PathBuf,
    },
}

#[derive(clap::Args)]
pub struct RunArgs {
    /// Shipped scenario name or scenario file path.
    #[arg(long, conflicts_with = "query")]
    scenario: Option<String>,
    /// Live query, answered with the configured reasoner and tool gateway.
    #[arg(long, required_unless_present = "scenario")]
    query: Option<String>,
    /// Initial state seeds for a live query (JSON list of {key, type, value}).
    #[arg(long, requires = "query")]
    state: Option<PathBuf>,
    #[arg(long)]
    tools_dir: Option<PathBuf>,
    #[arg(long)]
    contracts_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Retrieval depth.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kmax: Option<usize>,
    /// Trajectory log path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probe each tool's weakest precondition on the initial state instead of running.
    #[arg(long)]
    dry_run_wp: bool,
}

#[derive(clap::Args)]
pub struct ValidateArgs {
    #[arg(long)]
    contracts: PathBuf,
    #[arg(long)]
    tools: PathBuf,
}

#[derive(clap::Args)]
pub struct ReplayArgs {
    log: PathBuf,
    /// Verify against these contracts instead of the ones recorded in the log.
    #[arg(long)]
    contracts: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ReportArgs {
    /// Glob matching trajectory logs.
    pattern: String,
    /// Where to write the JSON report.
    #[arg(long, default_value = "rejection_report.json")]
    out: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("TOOLCONTRACT_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => commands::run(args),
        Command::Validate(args) => commands::validate(args),
        Command::Replay(args) => commands::replay(args),
        Command::Report(args) => commands::report(args),
        Command::ExportSuite { dir } => commands::export_suite(&dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
