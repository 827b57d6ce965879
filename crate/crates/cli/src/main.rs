mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use radagents_core::config::CONFIG_ENV;

/// Multi-agent chest X-ray interpretation over phantom studies.
#[derive(Debug, Parser)]
#[command(name = "radagents", version)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer one question about one study.
    Run(RunArgs),
    /// Score a task over a fixture directory.
    Eval(EvalArgs),
    /// Build or query a retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Write synthetic phantom fixtures.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Work with trajectory traces.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Study fixture JSON.
    #[arg(long)]
    study: PathBuf,
    /// Question or instruction.
    #[arg(long)]
    query: String,
    /// Resolve conflicts against retrieved exemplars.
    #[arg(long)]
    vrag: bool,
    /// Exemplars retrieved per conflict.
    #[arg(long)]
    k: Option<usize>,
    /// Index file; overrides the config.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Write the trajectory trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the full answer as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// ea, cp or report.
    #[arg(long)]
    task: String,
    #[arg(long)]
    fixtures: PathBuf,
    #[arg(long)]
    vrag: bool,
    #[arg(long)]
    k: Option<usize>,
    /// Index file. Without one, retrieval runs against a memory built from the fixtures.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Label flip probability for the mock tools.
    #[arg(long)]
    corrupt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metric report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-case traces; defaults to `<out>.traces`.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Embed every fixture and write an index file.
    Build {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest neighbours of one study.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Write the evaluation grids or a single parameterised study.
    #[command(group(ArgGroup::new("source").required(true).args(["grid", "params"])))]
    Gen {
        /// Existence grid under `<out>/ea`, comparison grid under `<out>/cp`.
        #[arg(long)]
        grid: bool,
        /// Phantom parameters: one object or an array.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Query finding recorded with `--params` studies.
        #[arg(long, requires = "params")]
        finding: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum TraceCommand {
    /// Print a trace as text.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Run(args) => commands::run(config, args),
        Command::Eval(args) => commands::eval(config, args),
        Command::Index(IndexCommand::Build { fixtures, out }) => commands::index_build(config, &fixtures, &out),
        Command::Index(IndexCommand::Query { index, study, k, json }) => {
            commands::index_query(config, &index, &study, k, json)
        }
        Command::Phantom(PhantomCommand::Gen {
            grid,
            params,
            finding,
            out,
        }) => commands::phantom_gen(grid, params.as_deref(), finding.as_deref(), &out),
        Command::Trace(TraceCommand::Render { input }) => commands::trace_render(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(2)
        }
    }
}

/// The error and its causes, skipping causes already quoted by the message above them.
fn chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}
