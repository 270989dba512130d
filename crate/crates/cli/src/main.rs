mod backends;
mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};

use commands::{ablate, diversity, evaluate, expand, report};
use config::Overrides;
use error::CliError;

/// Set by Ctrl-C; workers stop picking up new examples once it is raised.
pub static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "capex", version, about = "Caption-expansion image-text alignment harness")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that dataset image paths are relative to.
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    /// Examples processed concurrently.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Use the offline backends from the [mock] config section.
    #[arg(long, global = true)]
    mock: bool,
}

#[derive(Args, Clone, Default)]
pub struct WeightArgs {
    /// Score hypotheses and captions with the two [ensemble] endpoints.
    #[arg(long)]
    ensemble: bool,
    /// Weight of entailments against contradictions, in [0, 1] (default 0.5).
    #[arg(long)]
    alpha1: Option<f64>,
    /// Weight of expansions against the caption itself, in [0, 1] (default 0.6).
    #[arg(long)]
    alpha2: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Expand every caption of a dataset into entailed and opposite descriptions.
    Expand(expand::ExpandArgs),
    /// Score a dataset and report metrics.
    Evaluate(evaluate::EvaluateArgs),
    /// Sweep the weights and ablate score components from the cache alone.
    Ablate(ablate::AblateArgs),
    /// Lexical overlap between captions and their expansions.
    Diversity(diversity::DiversityArgs),
    /// Re-render a saved metric report.
    Report(report::ReportArgs),
}

impl GlobalArgs {
    fn overrides(&self, weights: Option<&WeightArgs>) -> Overrides {
        let w = weights.cloned().unwrap_or_default();
        Overrides {
            image_root: self.image_root.clone(),
            workers: self.workers,
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            ensemble: w.ensemble,
            mock: self.mock,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let config = g.config.as_deref();
    match &cli.command {
        Command::Expand(a) => expand::run(config, &g.overrides(None), a),
        Command::Evaluate(a) => evaluate::run(config, &g.overrides(Some(&a.weights)), a),
        Command::Ablate(a) => ablate::run(config, &g.overrides(Some(&a.weights)), a),
        Command::Diversity(a) => diversity::run(a),
        Command::Report(a) => report::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install Ctrl-C handler: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{}", e.to_json());
            ExitCode::from(e.exit_code)
        }
    }
}
