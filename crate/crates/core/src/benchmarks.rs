//! Dataset loading and end-to-end benchmark runs.
//!
//! A paired example holds two captions and two images whose matching
//! pairs lie on the diagonal. A rated example holds one prompt, one image
//! and a human judgement. Runs expand each caption once, score it against
//! the relevant images, and keep the raw triples so that weights can be
//! re-swept later without touching a model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{balance_cell, BalanceConfig, Degradation, PairTriples, RatedTriple};
use crate::expansion::{expand_caption, ExpansionError, ExpansionPolicy, ExpansionSet, PromptTemplate};
use crate::gateway::{GatewayError, ImageInput, LlmClient, VlmClient};
use crate::metrics::{BenchmarkKind, DegradedCounts, Provenance};
use crate::scoring::{score_caption_only, score_triple, ScoringContext, ScoringError, TripleScores};
use crate::store::{CacheKey, CachePolicy, CacheStats, CachingVlm, ExpansionEntry, Store, StoreError, StoreRecord};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation on line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("image not found: {path}")]
    MissingImage { path: PathBuf },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("dataset is empty")]
    EmptyInput,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cache is missing {} record(s), e.g. {}", .0.len(), .0.first().map(ToString::to_string).unwrap_or_default())]
    CacheIncomplete(Vec<CacheKey>),
    #[error("run interrupted")]
    Interrupted,
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Two captions, two images; `captions[j]` matches `images[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub id: String,
    pub captions: [String; 2],
    pub images: [PathBuf; 2],
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatingScale {
    #[serde(rename = "likert_1_5")]
    Likert1To5,
    #[serde(rename = "binary")]
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedExample {
    pub id: String,
    pub prompt: String,
    pub image: PathBuf,
    pub human_rating: f64,
    pub rating_scale: RatingScale,
}

/// Balanced scores of one paired example; `s[j][k]` is caption `j`
/// against image `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub example_id: String,
    pub s: [[f64; 2]; 2],
    pub degraded: [[Degradation; 2]; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    id: String,
    caption_0: String,
    caption_1: String,
    image_0: String,
    image_1: String,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatedLine {
    id: String,
    prompt: String,
    image: String,
    human_rating: f64,
    rating_scale: RatingScale,
}

fn resolve_image(root: &Path, rel: &str) -> Result<PathBuf, DatasetError> {
    let path = root.join(rel);
    if path.is_file() {
        Ok(path)
    } else {
        Err(DatasetError::MissingImage { path })
    }
}

/// Parses non-blank JSONL lines, giving each its 1-based line number.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.into(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DatasetError::SchemaViolation {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn check_id(seen: &mut HashSet<String>, id: &str, line: usize) -> Result<(), DatasetError> {
    let violation = |reason: String| DatasetError::SchemaViolation { line, reason };
    if id.trim().is_empty() {
        return Err(violation("empty id".into()));
    }
    if !seen.insert(id.to_string()) {
        return Err(violation(format!("duplicate id {id:?}")));
    }
    Ok(())
}

/// Loads a paired dataset; image paths resolve against `image_root`.
pub fn load_pair_dataset(path: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<Vec<PairExample>, DatasetError> {
    let root = image_root.as_ref();
    let mut seen = HashSet::new();
    read_jsonl::<PairLine>(path.as_ref())?
        .into_iter()
        .map(|(line, p)| {
            check_id(&mut seen, &p.id, line)?;
            if p.caption_0.trim().is_empty() || p.caption_1.trim().is_empty() {
                return Err(DatasetError::SchemaViolation {
                    line,
                    reason: "empty caption".into(),
                });
            }
            Ok(PairExample {
                images: [resolve_image(root, &p.image_0)?, resolve_image(root, &p.image_1)?],
                captions: [p.caption_0, p.caption_1],
                tags: p.tags.into_iter().collect(),
                id: p.id,
            })
        })
        .collect()
}

/// Loads a human-rated dataset; ratings must fit their declared scale.
pub fn load_rated_dataset(path: impl AsRef<Path>, image_root: impl AsRef<Path>) -> Result<Vec<RatedExample>, DatasetError> {
    let root = image_root.as_ref();
    let mut seen = HashSet::new();
    read_jsonl::<RatedLine>(path.as_ref())?
        .into_iter()
        .map(|(line, r)| {
            check_id(&mut seen, &r.id, line)?;
            let violation = |reason: &str| DatasetError::SchemaViolation {
                line,
                reason: reason.into(),
            };
            if r.prompt.trim().is_empty() {
                return Err(violation("empty prompt"));
            }
            let ok = match r.rating_scale {
                RatingScale::Likert1To5 => (1.0..=5.0).contains(&r.human_rating),
                RatingScale::Binary => r.human_rating == 0.0 || r.human_rating == 1.0,
            };
            if !ok {
                return Err(violation("rating outside its scale"));
            }
            Ok(RatedExample {
                image: resolve_image(root, &r.image)?,
                id: r.id,
                prompt: r.prompt,
                human_rating: r.human_rating,
                rating_scale: r.rating_scale,
            })
        })
        .collect()
}

pub fn tag_map(dataset: &[PairExample]) -> BTreeMap<String, BTreeSet<String>> {
    dataset.iter().map(|e| (e.id.clone(), e.tags.clone())).collect()
}

/// Counters for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub examples: usize,
    pub llm_calls: u64,
    pub vlm_calls: u64,
    pub expansion_failures: usize,
    /// Model calls that still failed in transport after retries. Nothing
    /// is cached for them, so a resumed run retries exactly these.
    pub gateway_failures: usize,
    pub cache: CacheStats,
}

/// Models, prompt and caching behaviour shared by every benchmark run.
pub struct Pipeline<'a> {
    pub llm: &'a dyn LlmClient,
    pub vlm_ec: &'a dyn VlmClient,
    pub vlm_cap: &'a dyn VlmClient,
    pub store: Option<&'a Store>,
    pub template: PromptTemplate,
    pub scoring: ScoringContext,
    pub expansion: ExpansionPolicy,
    pub workers: usize,
    /// Honoured as-is when `CacheOnly`; otherwise the `resume` argument of
    /// each run picks between `Resume` and `Refresh`.
    pub cache: CachePolicy,
    pub cancel: Option<&'a AtomicBool>,
}

impl<'a> Pipeline<'a> {
    pub fn new(llm: &'a dyn LlmClient, vlm_ec: &'a dyn VlmClient, vlm_cap: &'a dyn VlmClient) -> Self {
        Self {
            llm,
            vlm_ec,
            vlm_cap,
            store: None,
            template: PromptTemplate::builtin(),
            scoring: ScoringContext::default(),
            expansion: ExpansionPolicy::default(),
            workers: 4,
            cache: CachePolicy::Resume,
            cancel: None,
        }
    }

    pub fn with_store(mut self, store: &'a Store) -> Self {
        self.store = Some(store);
        self
    }

    fn policy(&self, resume: bool) -> CachePolicy {
        match (self.cache, resume) {
            (CachePolicy::CacheOnly, _) => CachePolicy::CacheOnly,
            (_, true) => CachePolicy::Resume,
            (_, false) => CachePolicy::Refresh,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, RunError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))
    }
}

/// Per-run state: cache wrappers and counters.
struct Session<'p, 'a> {
    pipeline: &'p Pipeline<'a>,
    policy: CachePolicy,
    ec: CachingVlm<'a>,
    cap: CachingVlm<'a>,
    llm_calls: AtomicU64,
    expansion_failures: AtomicU64,
    gateway_failures: AtomicU64,
    missing: Mutex<Vec<CacheKey>>,
    stats_before: CacheStats,
}

impl<'p, 'a> Session<'p, 'a> {
    fn new(pipeline: &'p Pipeline<'a>, resume: bool) -> Self {
        let policy = pipeline.policy(resume);
        Self {
            pipeline,
            policy,
            ec: CachingVlm::new(pipeline.vlm_ec, pipeline.store, policy),
            cap: CachingVlm::new(pipeline.vlm_cap, pipeline.store, policy),
            llm_calls: AtomicU64::new(0),
            expansion_failures: AtomicU64::new(0),
            gateway_failures: AtomicU64::new(0),
            missing: Mutex::new(Vec::new()),
            stats_before: pipeline.store.map(Store::stats).unwrap_or_default(),
        }
    }

    fn check_cancel(&self) -> Result<(), RunError> {
        match self.pipeline.cancel {
            Some(flag) if flag.load(Ordering::SeqCst) => Err(RunError::Interrupted),
            _ => Ok(()),
        }
    }

    /// The expansion entry for `caption`, from the store when allowed.
    /// `Ok(None)` means nothing was cached or could be produced.
    fn expansion_entry(&self, caption: &str) -> Result<Option<ExpansionEntry>, RunError> {
        let p = self.pipeline;
        let premise = caption.trim();
        let key = CacheKey::expansion(premise, p.llm.model(), p.template.hash());
        if let Some(store) = p.store {
            if self.policy != CachePolicy::Refresh {
                if let Some(entry) = store.get_expansion(&key) {
                    return Ok(Some(entry));
                }
                if self.policy == CachePolicy::CacheOnly {
                    self.missing.lock().unwrap().push(key);
                    return Ok(None);
                }
            }
        }
        let entry = match expand_caption(premise, p.llm, &p.template, &p.expansion) {
            Ok(exp) => {
                self.llm_calls.fetch_add(exp.attempts as u64, Ordering::Relaxed);
                ExpansionEntry::Expanded(exp.set)
            }
            Err(ExpansionError::Failed { attempts, reason }) => {
                self.llm_calls.fetch_add(attempts as u64, Ordering::Relaxed);
                log::warn!("expansion of {premise:?} failed: {reason}");
                ExpansionEntry::Failed {
                    premise: premise.to_string(),
                    attempts,
                    reason,
                }
            }
            Err(e) => {
                // transport failures are not cached so a later run retries them
                if let ExpansionError::Gateway { attempts, .. } = &e {
                    self.llm_calls.fetch_add(*attempts as u64, Ordering::Relaxed);
                    self.gateway_failures.fetch_add(1, Ordering::Relaxed);
                }
                log::warn!("expansion of {premise:?} failed: {e}");
                return Ok(None);
            }
        };
        if let Some(store) = p.store {
            store.put(&key, &StoreRecord::Expansion(entry.clone()))?;
        }
        Ok(Some(entry))
    }

    /// The expansion set for `caption`; `None` means the caption must be
    /// scored on its own.
    fn expansion(&self, caption: &str) -> Result<Option<ExpansionSet>, RunError> {
        match self.expansion_entry(caption)? {
            Some(ExpansionEntry::Expanded(set)) => Ok(Some(set)),
            _ => {
                self.expansion_failures.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
        }
    }

    /// Scores one (caption, image) cell, degrading to caption-only and
    /// then to nothing.
    fn cell(&self, premise: &str, expansion: Option<&ExpansionSet>, image: Option<&ImageInput>) -> Option<TripleScores> {
        let image = image?;
        let ctx = &self.pipeline.scoring;
        // misses in a cache-only run are reported together at the end
        let level = if self.policy == CachePolicy::CacheOnly {
            log::Level::Debug
        } else {
            log::Level::Warn
        };
        if let Some(set) = expansion {
            match score_triple(ctx, set, image, &self.ec, &self.cap) {
                Ok(t) => return Some(t),
                Err(e) => {
                    self.note_scoring_error(&e);
                    log::log!(level, "scoring expansions of {premise:?}: {e}; using caption only")
                }
            }
        }
        match score_caption_only(ctx, premise.trim(), image, &self.cap) {
            Ok(t) => Some(t),
            Err(e) => {
                self.note_scoring_error(&e);
                log::log!(level, "scoring {premise:?}: {e}; cell failed");
                None
            }
        }
    }

    fn note_scoring_error(&self, e: &ScoringError) {
        if matches!(e, ScoringError::Gateway(g) if !matches!(g, GatewayError::CacheMiss { .. })) {
            self.gateway_failures.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn image(path: &Path) -> Option<ImageInput> {
        ImageInput::from_path(path)
            .map_err(|e| log::warn!("{e}"))
            .ok()
    }

    fn pair(&self, ex: &PairExample) -> Result<PairTriples, RunError> {
        self.check_cancel()?;
        let images = [Self::image(&ex.images[0]), Self::image(&ex.images[1])];
        let expansions = [self.expansion(&ex.captions[0])?, self.expansion(&ex.captions[1])?];
        let cell = |j: usize, k: usize| self.cell(&ex.captions[j], expansions[j].as_ref(), images[k].as_ref());
        Ok(PairTriples {
            example_id: ex.id.clone(),
            tags: ex.tags.clone(),
            cells: [[cell(0, 0), cell(0, 1)], [cell(1, 0), cell(1, 1)]],
        })
    }

    fn rated(&self, ex: &RatedExample) -> Result<RatedTriple, RunError> {
        self.check_cancel()?;
        let image = Self::image(&ex.image);
        let expansion = self.expansion(&ex.prompt)?;
        Ok(RatedTriple {
            id: ex.id.clone(),
            human_rating: ex.human_rating,
            rating_scale: ex.rating_scale,
            triple: self.cell(&ex.prompt, expansion.as_ref(), image.as_ref()),
        })
    }

    fn finish(self, examples: usize) -> Result<RunStats, RunError> {
        if let Some(e) = self.ec.take_write_error().or_else(|| self.cap.take_write_error()) {
            return Err(e.into());
        }
        let mut missing = self.missing.into_inner().unwrap();
        missing.extend(self.ec.missing());
        missing.extend(self.cap.missing());
        if !missing.is_empty() {
            missing.sort_by(|a, b| a.payload_hash.cmp(&b.payload_hash));
            missing.dedup();
            return Err(RunError::CacheIncomplete(missing));
        }
        let after = self.pipeline.store.map(Store::stats).unwrap_or_default();
        Ok(RunStats {
            examples,
            llm_calls: self.llm_calls.into_inner(),
            vlm_calls: self.ec.forwarded() + self.cap.forwarded(),
            expansion_failures: self.expansion_failures.into_inner() as usize,
            gateway_failures: self.gateway_failures.into_inner() as usize,
            cache: CacheStats {
                hits: after.hits - self.stats_before.hits,
                misses: after.misses - self.stats_before.misses,
            },
        })
    }
}

/// Outcome of expanding one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaptionExpansion {
    Expanded(ExpansionSet),
    Failed { premise: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRun {
    pub results: Vec<CaptionExpansion>,
    pub stats: RunStats,
}

/// Expands every caption once, in input order. Unlike scoring runs this
/// never fails on a model error: the caption is reported as failed.
pub fn run_expansions(pipeline: &Pipeline<'_>, captions: &[String], resume: bool) -> Result<ExpansionRun, RunError> {
    if captions.is_empty() {
        return Err(RunError::EmptyInput);
    }
    let session = Session::new(pipeline, resume);
    let results = pipeline.pool()?.install(|| {
        captions
            .par_iter()
            .map(|c| {
                session.check_cancel()?;
                Ok(match session.expansion_entry(c)? {
                    Some(ExpansionEntry::Expanded(set)) => CaptionExpansion::Expanded(set),
                    Some(ExpansionEntry::Failed { premise, reason, .. }) => {
                        CaptionExpansion::Failed { premise, reason }
                    }
                    None => CaptionExpansion::Failed {
                        premise: c.trim().to_string(),
                        reason: "model unavailable".into(),
                    },
                })
            })
            .collect::<Result<Vec<_>, RunError>>()
    })?;
    let mut stats = session.finish(captions.len())?;
    stats.expansion_failures = results
        .iter()
        .filter(|r| matches!(r, CaptionExpansion::Failed { .. }))
        .count();
    Ok(ExpansionRun { results, stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRun {
    pub triples: Vec<PairTriples>,
    pub matrices: Vec<ScoreMatrix>,
    pub stats: RunStats,
}

/// Expands both captions of every example once, scores each caption
/// against both images and balances the four cells with `cfg`. Examples
/// run concurrently; output order follows the input.
pub fn run_pair_benchmark(
    pipeline: &Pipeline<'_>,
    dataset: &[PairExample],
    cfg: &BalanceConfig,
    resume: bool,
) -> Result<PairRun, RunError> {
    if dataset.is_empty() {
        return Err(RunError::EmptyInput);
    }
    let session = Session::new(pipeline, resume);
    let triples = pipeline
        .pool()?
        .install(|| dataset.par_iter().map(|ex| session.pair(ex)).collect::<Result<Vec<_>, _>>())?;
    let stats = session.finish(dataset.len())?;
    let matrices = triples.iter().map(|t| t.matrix(cfg)).collect();
    Ok(PairRun {
        triples,
        matrices,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedOutput {
    pub id: String,
    pub value: f64,
    pub human_rating: f64,
    pub rating_scale: RatingScale,
    pub degraded: Degradation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatedRun {
    pub triples: Vec<RatedTriple>,
    pub outputs: Vec<RatedOutput>,
    pub stats: RunStats,
}

pub fn rated_outputs(triples: &[RatedTriple], cfg: &BalanceConfig) -> Vec<RatedOutput> {
    triples
        .iter()
        .map(|t| {
            let b = balance_cell(t.triple.as_ref(), cfg);
            RatedOutput {
                id: t.id.clone(),
                value: b.value,
                human_rating: t.human_rating,
                rating_scale: t.rating_scale,
                degraded: b.degraded,
            }
        })
        .collect()
}

/// One balanced score per (prompt, image), paired with its human rating.
pub fn run_rated_benchmark(
    pipeline: &Pipeline<'_>,
    dataset: &[RatedExample],
    cfg: &BalanceConfig,
    resume: bool,
) -> Result<RatedRun, RunError> {
    if dataset.is_empty() {
        return Err(RunError::EmptyInput);
    }
    let session = Session::new(pipeline, resume);
    let triples = pipeline
        .pool()?
        .install(|| dataset.par_iter().map(|ex| session.rated(ex)).collect::<Result<Vec<_>, _>>())?;
    let stats = session.finish(dataset.len())?;
    let outputs = rated_outputs(&triples, cfg);
    Ok(RatedRun {
        triples,
        outputs,
        stats,
    })
}

fn count_cell(counts: &mut DegradedCounts, t: Option<&TripleScores>, cfg: &BalanceConfig) {
    match balance_cell(t, cfg).degraded {
        Degradation::Full => counts.full += 1,
        Degradation::NoContradictions => counts.no_contradictions += 1,
        Degradation::CaptionOnly => counts.caption_only += 1,
        Degradation::Failed => counts.failed += 1,
    }
    if t.is_some_and(TripleScores::is_asymmetric) {
        counts.asymmetric += 1;
    }
}

pub fn pair_degraded_counts(triples: &[PairTriples], cfg: &BalanceConfig) -> DegradedCounts {
    let mut counts = DegradedCounts::default();
    for cell in triples.iter().flat_map(|p| p.cells.iter().flatten()) {
        count_cell(&mut counts, cell.as_ref(), cfg);
    }
    counts
}

pub fn rated_degraded_counts(triples: &[RatedTriple], cfg: &BalanceConfig) -> DegradedCounts {
    let mut counts = DegradedCounts::default();
    for t in triples {
        count_cell(&mut counts, t.triple.as_ref(), cfg);
    }
    counts
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayCalls {
    pub llm: u64,
    pub vlm: u64,
}

/// Provenance and counters written next to a run's store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: BenchmarkKind,
    pub dataset: String,
    pub examples: usize,
    pub provenance: Provenance,
    pub degraded: DegradedCounts,
    pub expansion_failures: usize,
    pub gateway_failures: usize,
    pub gateway_calls: GatewayCalls,
    pub cache: CacheStats,
}
