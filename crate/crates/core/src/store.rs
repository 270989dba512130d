//! Content-addressed, append-only persistence for expansions and
//! likelihood records.
//!
//! Layout of a store directory:
//!
//! ```text
//! expansions.jsonl   {"key": <hex>, "record": <ExpansionEntry>}
//! likelihoods.jsonl  {"key": <hex>, "record": <LikelihoodRecord>}
//! manifest.json      provenance of the last run
//! ```
//!
//! Every line is flushed as soon as it is written. A partial trailing line
//! left by a crash is ignored and trimmed on the next open; any other
//! unreadable line is reported as corruption. Later lines for the same key
//! supersede earlier ones.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::expansion::ExpansionSet;
use crate::gateway::{GatewayError, ImageInput, LikelihoodMode, LikelihoodRecord, VlmClient};
use crate::hashing::canonical_hash;

pub const EXPANSIONS_FILE: &str = "expansions.jsonl";
pub const LIKELIHOODS_FILE: &str = "likelihoods.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store file {path} is corrupt at line {line}: {reason}")]
    StoreCorrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("disk full while writing {path}")]
    DiskFull { path: PathBuf },
    #[error("record kind does not match key kind {0:?}")]
    KindMismatch(CacheKind),
    #[error("store I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot serialize record: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::StorageFull {
            StoreError::DiskFull { path: path.into() }
        } else {
            StoreError::Io {
                path: path.into(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Expansion,
    Likelihood,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub kind: CacheKind,
    pub payload_hash: String,
}

impl CacheKey {
    pub fn expansion(caption: &str, llm_model: &str, prompt_hash: &str) -> Self {
        Self {
            kind: CacheKind::Expansion,
            payload_hash: canonical_hash(&json!({
                "caption": caption,
                "model": llm_model,
                "prompt_hash": prompt_hash,
            })),
        }
    }

    pub fn likelihood(question: &str, model: &str, mode: LikelihoodMode, image_id: &str) -> Self {
        Self {
            kind: CacheKind::Likelihood,
            payload_hash: canonical_hash(&json!({
                "question": question,
                "model": model,
                "mode": mode.as_str(),
                "image": image_id,
            })),
        }
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            CacheKind::Expansion => "expansion",
            CacheKind::Likelihood => "likelihood",
        };
        write!(f, "{kind}:{}", self.payload_hash)
    }
}

/// Outcome of expanding one caption. Failures are stored too, so that a
/// resumed run or a sweep sees the same degraded cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExpansionEntry {
    Expanded(ExpansionSet),
    Failed {
        premise: String,
        attempts: u32,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoreRecord {
    Expansion(ExpansionEntry),
    Likelihood(LikelihoodRecord),
}

impl StoreRecord {
    pub fn kind(&self) -> CacheKind {
        match self {
            StoreRecord::Expansion(_) => CacheKind::Expansion,
            StoreRecord::Likelihood(_) => CacheKind::Likelihood,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line<R> {
    key: String,
    record: R,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

struct Log<R> {
    path: PathBuf,
    index: RwLock<HashMap<String, R>>,
    writer: Mutex<BufWriter<File>>,
}

impl<R: Serialize + DeserializeOwned + Clone> Log<R> {
    fn open(path: PathBuf) -> Result<Self, StoreError> {
        let mut index = HashMap::new();
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            for (n, raw) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
                if raw.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let line: Line<R> = serde_json::from_slice(raw).map_err(|e| StoreError::StoreCorrupt {
                    path: path.clone(),
                    line: n + 1,
                    reason: e.to_string(),
                })?;
                index.insert(line.key, line.record);
            }
            if complete < bytes.len() {
                log::warn!(
                    "{}: discarding {} byte(s) of partial trailing record",
                    path.display(),
                    bytes.len() - complete
                );
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| StoreError::io(&path, e))?;
                f.set_len(complete as u64).map_err(|e| StoreError::io(&path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(Self {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    fn get(&self, key: &str) -> Option<R> {
        self.index.read().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, record: &R) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(&Line {
            key: key.to_string(),
            record,
        })?;
        line.push(b'\n');
        {
            let mut w = self.writer.lock().unwrap();
            w.write_all(&line)
                .and_then(|_| w.flush())
                .map_err(|e| StoreError::io(&self.path, e))?;
        }
        self.index
            .write()
            .unwrap()
            .insert(key.to_string(), record.clone());
        Ok(())
    }

    fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }
}

/// Append-only cache of model evidence. Writes are serialized through one
/// writer per file; reads are served from an in-memory index.
pub struct Store {
    dir: PathBuf,
    expansions: Log<ExpansionEntry>,
    likelihoods: Log<LikelihoodRecord>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.dir)
            .field("expansions", &self.expansions.len())
            .field("likelihoods", &self.likelihoods.len())
            .finish()
    }
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        Ok(Self {
            expansions: Log::open(dir.join(EXPANSIONS_FILE))?,
            likelihoods: Log::open(dir.join(LIKELIHOODS_FILE))?,
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&self, key: &CacheKey, record: &StoreRecord) -> Result<(), StoreError> {
        if key.kind != record.kind() {
            return Err(StoreError::KindMismatch(key.kind));
        }
        match record {
            StoreRecord::Expansion(r) => self.expansions.put(&key.payload_hash, r),
            StoreRecord::Likelihood(r) => {
                let mut r = r.clone();
                r.retrieved_from_cache = false;
                self.likelihoods.put(&key.payload_hash, &r)
            }
        }
    }

    /// Exact-match lookup; counts a hit or a miss.
    pub fn get(&self, key: &CacheKey) -> Option<StoreRecord> {
        let found = match key.kind {
            CacheKind::Expansion => self.expansions.get(&key.payload_hash).map(StoreRecord::Expansion),
            CacheKind::Likelihood => self.likelihoods.get(&key.payload_hash).map(|mut r| {
                r.retrieved_from_cache = true;
                StoreRecord::Likelihood(r)
            }),
        };
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn get_expansion(&self, key: &CacheKey) -> Option<ExpansionEntry> {
        match self.get(key)? {
            StoreRecord::Expansion(e) => Some(e),
            StoreRecord::Likelihood(_) => None,
        }
    }

    pub fn get_likelihood(&self, key: &CacheKey) -> Option<LikelihoodRecord> {
        match self.get(key)? {
            StoreRecord::Likelihood(r) => Some(r),
            StoreRecord::Expansion(_) => None,
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> (usize, usize) {
        (self.expansions.len(), self.likelihoods.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == (0, 0)
    }

    pub fn write_manifest<T: Serialize>(&self, manifest: &T) -> Result<(), StoreError> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| StoreError::io(&path, e))
    }
}

/// How a [`CachingVlm`] uses its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Always query the backend; still record results.
    Refresh,
    /// Serve hits from the store, query and record misses.
    Resume,
    /// Serve hits only; misses are errors and are remembered.
    CacheOnly,
}

/// Likelihood client that consults a [`Store`] before its backend and
/// counts the calls it forwards.
pub struct CachingVlm<'a> {
    inner: &'a dyn VlmClient,
    store: Option<&'a Store>,
    policy: CachePolicy,
    forwarded: AtomicU64,
    missing: Mutex<Vec<CacheKey>>,
    write_error: Mutex<Option<StoreError>>,
}

impl<'a> CachingVlm<'a> {
    pub fn new(inner: &'a dyn VlmClient, store: Option<&'a Store>, policy: CachePolicy) -> Self {
        Self {
            inner,
            store,
            policy,
            forwarded: AtomicU64::new(0),
            missing: Mutex::new(Vec::new()),
            write_error: Mutex::new(None),
        }
    }

    /// Queries that reached the backend.
    pub fn forwarded(&self) -> u64 {
        self.forwarded.load(Ordering::SeqCst)
    }

    /// Keys a cache-only client could not serve.
    pub fn missing(&self) -> Vec<CacheKey> {
        self.missing.lock().unwrap().clone()
    }

    /// First store write failure, if any.
    pub fn take_write_error(&self) -> Option<StoreError> {
        self.write_error.lock().unwrap().take()
    }
}

impl VlmClient for CachingVlm<'_> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError> {
        let key = CacheKey::likelihood(question, self.inner.model(), mode, image.id());
        if let Some(store) = self.store {
            if self.policy != CachePolicy::Refresh {
                if let Some(hit) = store.get_likelihood(&key) {
                    return Ok(hit);
                }
            }
            if self.policy == CachePolicy::CacheOnly {
                let shown = key.to_string();
                self.missing.lock().unwrap().push(key);
                return Err(GatewayError::CacheMiss { key: shown });
            }
        }
        self.forwarded.fetch_add(1, Ordering::SeqCst);
        let record = self.inner.query_likelihood(image, question, mode)?;
        if let Some(store) = self.store {
            if let Err(e) = store.put(&key, &StoreRecord::Likelihood(record.clone())) {
                self.write_error.lock().unwrap().get_or_insert(e);
            }
        }
        Ok(record)
    }
}
