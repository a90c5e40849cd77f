use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ebm_cli::{cmd_grade, cmd_replay, cmd_report, cmd_run, cmd_validate, BatchManifest, CliError, GradeArgs, ReportArgs};
use ebm_core::evaluation::GroupBy;
use ebm_core::protocol::RunConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ebm", version, about = "Run and grade clinical LLM agents on curated patient cases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every case file in a corpus directory.
    Validate { dir: PathBuf },
    /// Run an agent over every case and question in a corpus.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        /// Backend config file (JSON). Credentials come from the environment variable it names.
        #[arg(long)]
        backend: PathBuf,
        /// Replaces the default "professor of medicine" identity.
        #[arg(long)]
        identity: Option<String>,
        /// Withhold the guidelines tool.
        #[arg(long)]
        no_rag: bool,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value_t = 20)]
        max_steps: usize,
        #[arg(long, default_value_t = 3)]
        max_restarts: u32,
        #[arg(long, default_value_t = 3)]
        loop_threshold: usize,
        /// Token limit for the rendered prompt.
        #[arg(long)]
        context_limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-dispatch a transcript's actions and compare tool responses.
    Replay {
        file: PathBuf,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
    },
    /// Apply the cascade rule to grades and write specialty and difficulty reports.
    Grade {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        /// JSON object mapping long-form names to menu entries.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Write a percentage grid for one grouping.
    Report {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value = "specialty")]
        group_by: GroupBy,
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<bool, CliError> {
    let mut out = io::stdout().lock();
    match command {
        Command::Validate { dir } => cmd_validate(&dir, &mut out),
        Command::Run {
            corpus,
            backend,
            identity,
            no_rag,
            parallel,
            max_steps,
            max_restarts,
            loop_threshold,
            context_limit,
            out: out_dir,
        } => {
            let manifest = BatchManifest {
                corpus,
                backend,
                config: RunConfig {
                    max_steps,
                    max_restarts,
                    loop_threshold,
                    context_token_limit: context_limit,
                    rag_enabled: !no_rag,
                    ..RunConfig::default()
                },
                identity,
                parallel,
                out_dir,
            };
            cmd_run(&manifest, &mut out).map(|_| true)
        }
        Command::Replay { file, corpus } => cmd_replay(&file, &corpus, &mut out),
        Command::Grade { transcripts, annotations, corpus, aliases, out: out_dir } => {
            let args = GradeArgs {
                transcripts: &transcripts,
                annotations: &annotations,
                corpus: &corpus,
                aliases: aliases.as_deref(),
                out_dir: &out_dir,
            };
            cmd_grade(&args, &mut out).map(|_| true)
        }
        Command::Report { annotations, corpus, group_by, transcripts, aliases, out: out_dir } => {
            let args = ReportArgs {
                annotations: &annotations,
                corpus: &corpus,
                group_by,
                transcripts: transcripts.as_deref(),
                aliases: aliases.as_deref(),
                out_dir: &out_dir,
            };
            cmd_report(&args, &mut out).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
