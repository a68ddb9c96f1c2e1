use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mixquant_core::Error as CoreError;

mod commands;
mod settings;

use settings::{AnalyzeArgs, BenchArgs, EvalArgs, GenModelArgs, QuantizeArgs, SearchArgs, Settings};

/// Invalid invocation detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "mixquant", version, about = "Mixed-precision quantization between output features")]
struct Cli {
    /// JSON file with default settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random toy model.
    GenModel(GenModelArgs),
    /// Rank output channels globally and write the precision assignment.
    Search(SearchArgs),
    /// Split and quantize a model into mixed-precision layers.
    Quantize(QuantizeArgs),
    /// Compare a quantized model against its float source.
    Eval(EvalArgs),
    /// Time the mixed-precision GEMM engine.
    Bench(BenchArgs),
    /// Compute intensity and memory footprint reports.
    Analyze(AnalyzeArgs),
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn core_exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Usage(_) => EXIT_USAGE,
        CoreError::AtGroup { source, .. } => core_exit_code(source),
        _ => EXIT_DATA,
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return core_exit_code(c);
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    if cli.workers.is_some() {
        settings.workers = cli.workers;
    }
    match &cli.command {
        Command::GenModel(a) => a.apply(&mut settings),
        Command::Search(a) => a.apply(&mut settings),
        Command::Quantize(a) => a.apply(&mut settings),
        Command::Eval(a) => a.apply(&mut settings),
        Command::Bench(a) => a.apply(&mut settings),
        Command::Analyze(a) => a.apply(&mut settings),
    }
    if settings.workers == Some(0) {
        return Err(UsageError("--workers must be >= 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.unwrap_or(0))
        .build()?;
    log::debug!("running {:?} with {} workers", cli.command, pool.current_num_threads());
    pool.install(|| match &cli.command {
        Command::GenModel(_) => commands::gen_model(&settings),
        Command::Search(_) => commands::search(&settings),
        Command::Quantize(_) => commands::quantize(&settings),
        Command::Eval(_) => commands::eval(&settings),
        Command::Bench(_) => commands::bench(&settings),
        Command::Analyze(_) => commands::analyze(&settings),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MIXQUANT_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
