use std::path::Path;

use capex::aggregation::AggregationError;
use capex::benchmarks::{DatasetError, RunError};
use capex::expansion::ExpansionError;
use capex::gateway::GatewayError;
use capex::metrics::MetricError;
use capex::store::StoreError;
use serde_json::{json, Value};

/// Exit status for configuration and input validation failures.
pub const EXIT_INVALID: u8 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: u8 = 1;

/// A failure reported to the operator as one JSON object on stderr.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: u8,
    pub kind: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl CliError {
    pub fn invalid(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_INVALID,
            kind,
            message: message.into(),
            details: None,
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit_code: EXIT_RUNTIME,
            kind,
            message: message.into(),
            details: None,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::runtime("Io", format!("{}: {err}", path.display()))
    }

    /// Outputs are written before this check; only the failed calls are
    /// uncached, so `--resume` retries just those.
    pub fn check_gateway(failures: usize) -> Result<(), Self> {
        if failures == 0 {
            return Ok(());
        }
        let mut e = Self::runtime(
            "GatewayUnavailable",
            format!("{failures} model call(s) failed after retries; outputs are partial, rerun with --resume"),
        );
        e.details = Some(json!({ "failed_calls": failures }));
        Err(e)
    }

    pub fn to_json(&self) -> Value {
        let mut body = json!({
            "kind": self.kind,
            "message": self.message,
            "exit_code": self.exit_code,
        });
        if let Some(d) = &self.details {
            body["details"] = d.clone();
        }
        json!({ "error": body })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let kind = match e {
            DatasetError::Io { .. } => "DatasetUnreadable",
            DatasetError::SchemaViolation { .. } => "SchemaViolation",
            DatasetError::MissingImage { .. } => "MissingImage",
        };
        Self::invalid(kind, e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::EmptyInput => Self::invalid("EmptyInput", e.to_string()),
            RunError::Store(s) => s.into(),
            RunError::CacheIncomplete(ref keys) => {
                let mut err = Self::runtime("CacheIncomplete", e.to_string());
                let keys: Vec<String> = keys.iter().map(ToString::to_string).collect();
                err.details = Some(json!({ "missing_keys": keys }));
                err
            }
            RunError::Interrupted => Self::runtime("Interrupted", e.to_string()),
            RunError::Pool(_) => Self::runtime("WorkerPool", e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let kind = match e {
            StoreError::StoreCorrupt { .. } => "StoreCorrupt",
            StoreError::DiskFull { .. } => "DiskFull",
            _ => "Store",
        };
        Self::runtime(kind, e.to_string())
    }
}

impl From<AggregationError> for CliError {
    fn from(e: AggregationError) -> Self {
        match e {
            AggregationError::AlphaOutOfRange { .. } | AggregationError::EmptyGrid => {
                Self::invalid("InvalidWeights", e.to_string())
            }
            AggregationError::Metric(m) => m.into(),
            _ => Self::runtime("Aggregation", e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::runtime("Metric", e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidEndpoint { .. } | GatewayError::WrongKind { .. } => {
                Self::invalid("InvalidEndpoint", e.to_string())
            }
            GatewayError::ImageUnreadable { .. } => Self::invalid("MissingImage", e.to_string()),
            _ => Self::runtime("Gateway", e.to_string()),
        }
    }
}

impl From<ExpansionError> for CliError {
    fn from(e: ExpansionError) -> Self {
        match e {
            ExpansionError::InvalidTemplate(_) | ExpansionError::TemplateIo { .. } => {
                Self::invalid("InvalidTemplate", e.to_string())
            }
            ExpansionError::EmptyInput => Self::invalid("EmptyInput", e.to_string()),
            _ => Self::runtime("Expansion", e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime("Serialize", e.to_string())
    }
}
