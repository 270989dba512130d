use std::path::PathBuf;

use capex::metrics::MetricReport;
use clap::{Args, ValueEnum};

use super::evaluate::REPORT_JSON;
use super::print_stdout;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Args)]
pub struct ReportArgs {
    /// A report.json, or the output directory of an evaluate run.
    path: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

pub fn run(args: &ReportArgs) -> Result<(), CliError> {
    let path = if args.path.is_dir() {
        args.path.join(REPORT_JSON)
    } else {
        args.path.clone()
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::invalid("MissingFile", format!("{}: {e}", path.display())))?;
    let report: MetricReport = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid("SchemaViolation", format!("{}: {e}", path.display())))?;
    let out = match args.format {
        Format::Table => report.render_table(),
        Format::Csv => report.render_csv(),
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
    };
    print_stdout(&out)
}
