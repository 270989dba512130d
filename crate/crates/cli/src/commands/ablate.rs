use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use capex::aggregation::{
    ablation_retrieval, component_ablation, AblationRow, sweep_pairs, sweep_rated, Grid, SweepRow, ABLATION_COLUMNS,
};
use capex::benchmarks::{run_pair_benchmark, run_rated_benchmark};
use capex::metrics::{rated_metrics, RETRIEVAL_METRIC_NAMES};
use capex::store::CachePolicy;
use clap::Args;

use super::{create_dir, print_stdout, rating_scale, write_file, Benchmark, Dataset, Session};
use crate::config::Overrides;
use crate::error::CliError;
use crate::{WeightArgs, CANCEL};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

const RATED_METRIC_NAMES: [&str; 5] = ["pearson", "kendall_tau", "auroc", "pairwise_accuracy", "binary_accuracy"];

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset JSONL of a previous evaluate run.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    benchmark: Benchmark,
    /// Directory for sweep.csv and ablation.csv.
    #[arg(long, default_value = "capex-out")]
    out: PathBuf,
    /// Evenly spaced values from 0 to 1 on each axis.
    #[arg(long, default_value_t = 11)]
    steps: usize,
    /// Explicit alpha1 values, comma separated; overrides --steps on that axis.
    #[arg(long, value_delimiter = ',')]
    alpha1_grid: Option<Vec<f64>>,
    /// Explicit alpha2 values, comma separated.
    #[arg(long, value_delimiter = ',')]
    alpha2_grid: Option<Vec<f64>>,
    /// Metric to sweep; repeatable. Defaults to group_score for paired
    /// data and every defined metric for rated data.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    #[command(flatten)]
    pub weights: WeightArgs,
}

fn grid(args: &AblateArgs) -> Result<Grid, CliError> {
    let uniform = Grid::uniform(args.steps)?;
    Ok(Grid::new(
        args.alpha1_grid.clone().unwrap_or(uniform.alpha1),
        args.alpha2_grid.clone().unwrap_or(uniform.alpha2),
    )?)
}

fn metric_names<'a>(args: &'a AblateArgs, known: &[&str], default: &[&'a str]) -> Result<Vec<&'a str>, CliError> {
    if args.metrics.is_empty() {
        return Ok(default.to_vec());
    }
    args.metrics
        .iter()
        .map(|m| {
            if known.contains(&m.as_str()) {
                Ok(m.as_str())
            } else {
                Err(CliError::invalid(
                    "UnknownMetric",
                    format!("{m:?} is not one of {}", known.join(", ")),
                ))
            }
        })
        .collect()
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha1,alpha2,metric_name,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.alpha1, r.alpha2, r.metric_name, r.value);
    }
    out
}

/// Long-format ablation rows: `(variant, metric, value)`.
type AblationTable = Vec<(&'static str, &'static str, f64)>;

fn render_ablation(table: &AblationTable) -> (String, String) {
    let mut csv = String::from("variant,metric_name,value\n");
    let mut text = format!("{:<12}  {:<18}  {:>8}\n", "variant", "metric", "value");
    for (variant, metric, value) in table {
        let _ = writeln!(csv, "{variant},{metric},{value}");
        let _ = writeln!(text, "{variant:<12}  {metric:<18}  {value:>8.4}");
    }
    (csv, text)
}

/// Recombines cached triples only: every expansion and likelihood must
/// already be in the store.
pub fn run(config: Option<&Path>, ov: &Overrides, args: &AblateArgs) -> Result<(), CliError> {
    let session = Session::open(config, ov, &args.dataset, args.benchmark)?;
    let cfg = &session.cfg.balance;
    let mut pipeline = session.backends.pipeline(&session.cfg, &session.store);
    pipeline.cache = CachePolicy::CacheOnly;
    pipeline.cancel = Some(&CANCEL);
    let grid = grid(args)?;

    let (rows, table): (Vec<SweepRow>, AblationTable) = match &session.dataset {
        Dataset::Pair(data) => {
            let names = metric_names(args, &RETRIEVAL_METRIC_NAMES, &["group_score"])?;
            let run = run_pair_benchmark(&pipeline, data, cfg, true)?;
            let rows = sweep_pairs(&run.triples, &grid, cfg, &names)?;
            let table = ablation_retrieval(&run.triples, cfg)?
                .into_iter()
                .flat_map(|(variant, m)| {
                    RETRIEVAL_METRIC_NAMES
                        .iter()
                        .map(move |name| (variant, *name, m.get(name).unwrap_or(f64::NAN)))
                })
                .collect();
            (rows, table)
        }
        Dataset::Rated(data) => {
            let scale = rating_scale(data)?;
            let names = metric_names(args, &RATED_METRIC_NAMES, &[])?;
            let run = run_rated_benchmark(&pipeline, data, cfg, true)?;
            let rows = sweep_rated(&run.triples, &grid, cfg, &names)?;
            let mut table = AblationTable::new();
            let scored: Vec<_> = run.triples.iter().filter_map(|t| t.triple.clone()).collect();
            let ratings: Vec<f64> = run
                .triples
                .iter()
                .filter(|t| t.triple.is_some())
                .map(|t| t.human_rating)
                .collect();
            let ablation = component_ablation(&scored, cfg);
            let columns: [fn(&AblationRow) -> f64; 3] =
                [|r| r.e_only, |r| r.e_plus_c, |r| r.e_c_caption];
            for (variant, pick) in ABLATION_COLUMNS.iter().zip(columns) {
                let pairs: Vec<(f64, f64)> = ablation.iter().map(pick).zip(ratings.iter().copied()).collect();
                for (metric, value) in rated_metrics(&pairs, scale)?.entries() {
                    table.push((variant, metric, value));
                }
            }
            (rows, table)
        }
    };

    create_dir(&args.out)?;
    write_file(&args.out.join(SWEEP_FILE), sweep_csv(&rows).as_bytes())?;
    let (csv, text) = render_ablation(&table);
    write_file(&args.out.join(ABLATION_FILE), csv.as_bytes())?;

    let mut summary = format!(
        "component ablation at alpha1={} alpha2={}\n{text}sweep: {} row(s) over {} grid point(s) written to {}\n",
        cfg.alpha1,
        cfg.alpha2,
        rows.len(),
        grid.len(),
        args.out.join(SWEEP_FILE).display()
    );
    let mut names: Vec<&str> = rows.iter().map(|r| r.metric_name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        if let Some(best) = rows
            .iter()
            .filter(|r| r.metric_name == name)
            .max_by(|a, b| a.value.total_cmp(&b.value))
        {
            let _ = writeln!(
                summary,
                "best {name}: {} at alpha1={} alpha2={}",
                best.value, best.alpha1, best.alpha2
            );
        }
    }
    print_stdout(&summary)
}
