use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use capex::benchmarks::CaptionExpansion;
use capex::expansion::{diversity_report, ExpansionSet};
use clap::Args;
use serde_json::Value;

use super::{pretty_json, print_stdout, write_file, Benchmark};
use crate::error::CliError;

#[derive(Args)]
pub struct DiversityArgs {
    /// Expansion JSONL, as written by `expand`.
    #[arg(long)]
    expansions: PathBuf,
    /// Restrict to, and order by, the captions of this dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    benchmark: Benchmark,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_expansions(path: &Path) -> Result<Vec<ExpansionSet>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::invalid("MissingFile", format!("{}: {e}", path.display())))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| {
            CliError::invalid("SchemaViolation", format!("{} line {}: {e}", path.display(), i + 1))
        };
        let value: Value = serde_json::from_str(&line).map_err(bad)?;
        if value.get("status").is_some() {
            if let CaptionExpansion::Expanded(set) = serde_json::from_value(value).map_err(bad)? {
                sets.push(set);
            }
        } else {
            sets.push(serde_json::from_value(value).map_err(bad)?);
        }
    }
    Ok(sets)
}

/// Captions of a dataset file. Only the text fields are read; images are
/// not needed here.
fn dataset_captions(path: &Path, kind: Benchmark) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid("MissingFile", format!("{}: {e}", path.display())))?;
    let fields: &[&str] = match kind {
        Benchmark::Pair => &["caption_0", "caption_1"],
        Benchmark::Rated => &["prompt"],
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: Value = serde_json::from_str(line)
            .map_err(|e| CliError::invalid("SchemaViolation", format!("line {}: {e}", i + 1)))?;
        for f in fields {
            let caption = value.get(*f).and_then(Value::as_str).ok_or_else(|| {
                CliError::invalid("SchemaViolation", format!("line {}: missing string field {f:?}", i + 1))
            })?;
            out.push(caption.trim().to_string());
        }
    }
    Ok(out)
}

pub fn run(args: &DiversityArgs) -> Result<(), CliError> {
    let mut sets = read_expansions(&args.expansions)?;
    if let Some(dataset) = &args.dataset {
        let mut by_premise: HashMap<String, ExpansionSet> =
            sets.into_iter().map(|s| (s.premise.trim().to_string(), s)).collect();
        sets = Vec::new();
        for caption in dataset_captions(dataset, args.benchmark)? {
            match by_premise.remove(&caption) {
                Some(set) => sets.push(set),
                None => log::warn!("no expansion for {caption:?}"),
            }
        }
    }
    let report = diversity_report(&sets)?;
    let mut text = format!(
        "mean jaccard vs premise: {:.4} over {} sample(s)\n",
        report.mean_jaccard_vs_premise,
        report.per_sample.len()
    );
    for s in &report.per_sample {
        let _ = writeln!(text, "{:.4}  {}", s.jaccard, s.premise);
    }
    if let Some(out) = &args.out {
        write_file(out, &pretty_json(&report)?)?;
    }
    print_stdout(&text)
}
