pub mod ablate;
pub mod diversity;
pub mod evaluate;
pub mod expand;
pub mod report;

use std::fs;
use std::io::Write;
use std::path::Path;

use capex::benchmarks::{load_pair_dataset, load_rated_dataset, PairExample, RatedExample, RatingScale};
use capex::metrics::Provenance;
use capex::store::Store;
use clap::ValueEnum;
use serde::Serialize;

use crate::backends::Backends;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Benchmark {
    /// Two captions and two images per line.
    #[default]
    Pair,
    /// One prompt, one image and a human rating per line.
    Rated,
}

pub enum Dataset {
    Pair(Vec<PairExample>),
    Rated(Vec<RatedExample>),
}

impl Dataset {
    pub fn load(path: &Path, kind: Benchmark, image_root: &Path) -> Result<Self, CliError> {
        Ok(match kind {
            Benchmark::Pair => Dataset::Pair(load_pair_dataset(path, image_root)?),
            Benchmark::Rated => Dataset::Rated(load_rated_dataset(path, image_root)?),
        })
    }

    /// Distinct captions in first-seen order.
    pub fn captions(&self) -> Vec<String> {
        let all: Vec<&str> = match self {
            Dataset::Pair(d) => d.iter().flat_map(|e| e.captions.iter().map(String::as_str)).collect(),
            Dataset::Rated(d) => d.iter().map(|e| e.prompt.as_str()).collect(),
        };
        let mut seen = std::collections::HashSet::new();
        all.into_iter()
            .map(str::trim)
            .filter(|c| seen.insert(*c))
            .map(str::to_string)
            .collect()
    }
}

/// Everything a model-backed subcommand needs.
pub struct Session {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub dataset_name: String,
    pub store: Store,
    pub backends: Backends,
}

impl Session {
    pub fn open(config: Option<&Path>, ov: &Overrides, dataset: &Path, kind: Benchmark) -> Result<Self, CliError> {
        let cfg = RunConfig::load(config, ov)?;
        let root = cfg.image_root_for(dataset);
        let data = Dataset::load(dataset, kind, &root)?;
        let store = Store::open(&cfg.store_dir)?;
        let backends = Backends::build(&cfg, &root)?;
        Ok(Self {
            dataset_name: dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            cfg,
            dataset: data,
            store,
            backends,
        })
    }

    pub fn provenance(&self) -> Provenance {
        let b = &self.backends;
        Provenance {
            llm: b.llm.model().to_string(),
            vlm_ec: b.vlm_ec.model().to_string(),
            vlm_cap: b.vlm_cap.model().to_string(),
            alpha1: self.cfg.balance.alpha1,
            alpha2: self.cfg.balance.alpha2,
            prompt_hash: self.cfg.template.hash().to_string(),
            question_template: self.cfg.question_template.as_str().to_string(),
            mode: self.cfg.mode.as_str().to_string(),
            ensemble: self.cfg.ensemble,
        }
    }
}

/// The one rating scale shared by every example.
pub fn rating_scale(data: &[RatedExample]) -> Result<RatingScale, CliError> {
    let first = data
        .first()
        .ok_or_else(|| CliError::invalid("EmptyInput", "dataset is empty"))?
        .rating_scale;
    match data.iter().find(|e| e.rating_scale != first) {
        Some(e) => Err(CliError::invalid(
            "SchemaViolation",
            format!("example {:?} mixes rating scales within one dataset", e.id),
        )),
        None => Ok(first),
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn print_stdout(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::runtime("Io", format!("stdout: {e}")))
}
