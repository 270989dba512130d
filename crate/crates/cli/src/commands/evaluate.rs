use std::path::{Path, PathBuf};

use capex::benchmarks::{
    pair_degraded_counts, rated_degraded_counts, run_pair_benchmark, run_rated_benchmark, tag_map, GatewayCalls,
    RunManifest, RunStats,
};
use capex::metrics::{rated_metrics, retrieval_metrics, BenchmarkKind, DegradedCounts, MetricReport};
use clap::Args;

use super::{create_dir, jsonl, rating_scale, pretty_json, print_stdout, write_file, Benchmark, Dataset, Session};
use crate::config::Overrides;
use crate::error::CliError;
use crate::{WeightArgs, CANCEL};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    benchmark: Benchmark,
    /// Directory for scores, triples, report and manifest.
    #[arg(long, default_value = "capex-out")]
    out: PathBuf,
    /// Reuse expansions and likelihoods already in the store.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    pub weights: WeightArgs,
}

pub const SCORES_FILE: &str = "scores.jsonl";
pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

const MULTI_TAG_NOTE: &str = "examples carrying several tags count once in each tag";

pub fn notes(degraded: &DegradedCounts, tagged: bool) -> Vec<String> {
    let mut notes = Vec::new();
    if tagged {
        notes.push(MULTI_TAG_NOTE.to_string());
    }
    let partial = degraded.no_contradictions + degraded.caption_only + degraded.failed;
    if partial > 0 {
        notes.push(format!("{partial} cell(s) scored without a full expansion"));
    }
    notes
}

pub fn run(config: Option<&Path>, ov: &Overrides, args: &EvaluateArgs) -> Result<(), CliError> {
    let session = Session::open(config, ov, &args.dataset, args.benchmark)?;
    let cfg = &session.cfg.balance;
    let mut pipeline = session.backends.pipeline(&session.cfg, &session.store);
    pipeline.cancel = Some(&CANCEL);
    create_dir(&args.out)?;

    let (report, stats): (MetricReport, RunStats) = match &session.dataset {
        Dataset::Pair(data) => {
            let run = run_pair_benchmark(&pipeline, data, cfg, args.resume)?;
            write_file(&args.out.join(SCORES_FILE), &jsonl(&run.matrices)?)?;
            write_file(&args.out.join(TRIPLES_FILE), &jsonl(&run.triples)?)?;
            let tags = tag_map(data);
            let retrieval = retrieval_metrics(&run.matrices, Some(&tags))?;
            let degraded = pair_degraded_counts(&run.triples, cfg);
            let report = MetricReport {
                benchmark: session.dataset_name.clone(),
                kind: BenchmarkKind::Pair,
                n: data.len(),
                notes: notes(&degraded, !retrieval.per_tag.is_empty()),
                retrieval: Some(retrieval),
                rated: None,
                degraded,
                provenance: session.provenance(),
            };
            (report, run.stats)
        }
        Dataset::Rated(data) => {
            rating_scale(data)?;
            let run = run_rated_benchmark(&pipeline, data, cfg, args.resume)?;
            write_file(&args.out.join(SCORES_FILE), &jsonl(&run.outputs)?)?;
            write_file(&args.out.join(TRIPLES_FILE), &jsonl(&run.triples)?)?;
            let pairs: Vec<(f64, f64)> = run.outputs.iter().map(|o| (o.value, o.human_rating)).collect();
            let rated = rated_metrics(&pairs, data[0].rating_scale)?;
            let degraded = rated_degraded_counts(&run.triples, cfg);
            let report = MetricReport {
                benchmark: session.dataset_name.clone(),
                kind: BenchmarkKind::Rated,
                n: data.len(),
                notes: notes(&degraded, false),
                retrieval: None,
                rated: Some(rated),
                degraded,
                provenance: session.provenance(),
            };
            (report, run.stats)
        }
    };

    let manifest = RunManifest {
        kind: report.kind,
        dataset: args.dataset.display().to_string(),
        examples: report.n,
        provenance: report.provenance.clone(),
        degraded: report.degraded.clone(),
        expansion_failures: stats.expansion_failures,
        gateway_failures: stats.gateway_failures,
        gateway_calls: GatewayCalls {
            llm: stats.llm_calls,
            vlm: stats.vlm_calls,
        },
        cache: stats.cache,
    };
    session.store.write_manifest(&manifest)?;
    write_file(&args.out.join(MANIFEST_FILE), &pretty_json(&manifest)?)?;
    write_file(&args.out.join(REPORT_JSON), &pretty_json(&report)?)?;
    write_file(&args.out.join(REPORT_CSV), report.render_csv().as_bytes())?;
    print_stdout(&report.render_table())?;
    CliError::check_gateway(stats.gateway_failures)
}
