use std::path::{Path, PathBuf};

use capex::benchmarks::{run_expansions, CaptionExpansion};
use clap::Args;

use super::{jsonl, print_stdout, write_file, Benchmark, Session};
use crate::config::Overrides;
use crate::error::CliError;
use crate::CANCEL;

#[derive(Args)]
pub struct ExpandArgs {
    /// Dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    benchmark: Benchmark,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ask the model again even for captions already in the store.
    #[arg(long)]
    refresh: bool,
}

/// Cached expansions are reused unless `--refresh` is given, so reruns
/// are idempotent.
pub fn run(config: Option<&Path>, ov: &Overrides, args: &ExpandArgs) -> Result<(), CliError> {
    let session = Session::open(config, ov, &args.dataset, args.benchmark)?;
    let mut pipeline = session.backends.pipeline(&session.cfg, &session.store);
    pipeline.cancel = Some(&CANCEL);
    let captions = session.dataset.captions();
    let run = run_expansions(&pipeline, &captions, !args.refresh)?;
    let body = jsonl(&run.results)?;
    match &args.out {
        Some(path) => write_file(path, &body)?,
        None => print_stdout(&String::from_utf8_lossy(&body))?,
    }
    for r in &run.results {
        if let CaptionExpansion::Failed { premise, reason } = r {
            log::warn!("no expansion for {premise:?}: {reason}");
        }
    }
    eprintln!(
        "expanded {} caption(s), {} failed, {} model call(s)",
        run.results.len(),
        run.stats.expansion_failures,
        run.stats.llm_calls
    );
    CliError::check_gateway(run.stats.gateway_failures)
}
