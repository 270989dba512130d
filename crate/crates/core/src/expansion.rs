//! Caption expansion: prompt rendering, parsing of the model's JSON
//! answer, validation, and lexical-diversity measurement.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{GenerateParams, LlmClient};
use crate::hashing::sha256_hex;

/// Built-in expansion prompt, version 1.
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/expansion_prompt_v1.txt");

/// The single substitution site in a prompt template.
pub const CAPTION_PLACEHOLDER: &str = "{Caption}";

pub const ENTAILED_KEY: &str = "Entailed descriptions";
pub const OPPOSITE_KEY: &str = "Opposite descriptions";

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("cannot read prompt template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("expansion failed after {attempts} attempt(s): {reason}")]
    Failed { attempts: u32, reason: String },
    #[error("model call failed on attempt {attempts}: {source}")]
    Gateway {
        attempts: u32,
        #[source]
        source: crate::gateway::GatewayError,
    },
    #[error("no expansions given")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("value of {0:?} is not a list of strings")]
    NotAStringList(String),
}

/// A prompt template with exactly one `{Caption}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    split: usize,
    hash: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, ExpansionError> {
        let text = text.into();
        let mut sites = text.match_indices(CAPTION_PLACEHOLDER);
        let split = match (sites.next(), sites.next()) {
            (Some((i, _)), None) => i,
            (None, _) => {
                return Err(ExpansionError::InvalidTemplate(format!(
                    "no {CAPTION_PLACEHOLDER} placeholder"
                )))
            }
            (Some(_), Some(_)) => {
                return Err(ExpansionError::InvalidTemplate(format!(
                    "more than one {CAPTION_PLACEHOLDER} placeholder"
                )))
            }
        };
        let hash = sha256_hex(&text);
        Ok(Self { text, split, hash })
    }

    pub fn builtin() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("built-in template has one placeholder")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ExpansionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExpansionError::TemplateIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Hex SHA-256 of the template text; part of every expansion cache key.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Substitutes the caption in a single pass. Braces inside the caption
    /// are copied literally.
    pub fn render(&self, caption: &str) -> Result<String, ExpansionError> {
        let caption = caption.trim();
        if caption.is_empty() {
            return Err(ExpansionError::EmptyCaption);
        }
        let tail = &self.text[self.split + CAPTION_PLACEHOLDER.len()..];
        let mut out = String::with_capacity(self.text.len() + caption.len());
        out.push_str(&self.text[..self.split]);
        out.push_str(caption);
        out.push_str(tail);
        Ok(out)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Renders the built-in template for `caption`.
pub fn render_prompt(caption: &str) -> Result<String, ExpansionError> {
    PromptTemplate::builtin().render(caption)
}

/// Entailed and opposite descriptions as read from model output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExpansion {
    pub entailments: Vec<String>,
    pub contradictions: Vec<String>,
}

impl ParsedExpansion {
    /// The JSON object form the model is asked to produce.
    pub fn to_llm_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert(ENTAILED_KEY.into(), Value::from(self.entailments.clone()));
        obj.insert(OPPOSITE_KEY.into(), Value::from(self.contradictions.clone()));
        Value::Object(obj).to_string()
    }
}

/// Entailment and contradiction hypotheses for one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionSet {
    pub premise: String,
    pub entailments: Vec<String>,
    pub contradictions: Vec<String>,
    pub llm_model: String,
    pub prompt_hash: String,
}

impl ExpansionSet {
    pub fn parsed(&self) -> ParsedExpansion {
        ParsedExpansion {
            entailments: self.entailments.clone(),
            contradictions: self.contradictions.clone(),
        }
    }
}

/// Top-level `{...}` spans. Quotes are tracked only inside braces so that
/// stray quotation marks in surrounding prose do not hide an object.
fn object_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if depth > 0 && in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' if depth > 0 => in_string = true,
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans
}

fn find_key<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).or_else(|| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

fn clean(items: impl IntoIterator<Item = String>) -> Vec<String> {
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn strict_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ParseError> {
    let value = find_key(obj, key).ok_or_else(|| ParseError::MissingKey(key.into()))?;
    let items = value
        .as_array()
        .ok_or_else(|| ParseError::NotAStringList(key.into()))?;
    let strings = items
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ParseError::NotAStringList(key.into()))?;
    Ok(clean(strings))
}

/// Byte offset just past the last `key` (optionally quoted) followed by a
/// colon.
fn relaxed_value_start(text: &str, key: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    let needle = key.to_ascii_lowercase();
    lower.rmatch_indices(&needle).find_map(|(i, _)| {
        let rest = &text[i + needle.len()..];
        let rest_trim = rest.strip_prefix('"').unwrap_or(rest).trim_start();
        let after = rest_trim.strip_prefix(':')?;
        Some(text.len() - after.len())
    })
}

/// Reads a bracketed list whose items may be JSON strings or bare text,
/// as in the template's own example output.
fn relaxed_list(text: &str, key: &str) -> Result<Vec<String>, ParseError> {
    let start = relaxed_value_start(text, key).ok_or_else(|| ParseError::MissingKey(key.into()))?;
    let not_list = || ParseError::NotAStringList(key.into());
    let mut rest = text[start..].trim_start().strip_prefix('[').ok_or_else(not_list)?;
    let mut items = Vec::new();
    loop {
        rest = rest.trim_start();
        if rest.starts_with(']') {
            return Ok(clean(items));
        }
        if rest.starts_with('"') {
            let end = string_literal_end(rest).ok_or_else(not_list)?;
            let s: String = serde_json::from_str(&rest[..end]).map_err(|_| not_list())?;
            items.push(s);
            rest = rest[end..].trim_start();
        } else {
            let end = rest.find([',', ']', '\n']).ok_or_else(not_list)?;
            if rest[end..].starts_with('\n') {
                return Err(not_list());
            }
            let bare = rest[..end].trim();
            let unquoted = bare
                .strip_prefix('\'')
                .and_then(|b| b.strip_suffix('\''))
                .filter(|b| !b.is_empty());
            items.push(unquoted.unwrap_or(bare).to_string());
            rest = &rest[end..];
        }
        if let Some(r) = rest.strip_prefix(',') {
            rest = r;
        } else if !rest.starts_with(']') {
            return Err(not_list());
        }
    }
}

/// Length of the JSON string literal at the start of `s`, quotes included.
fn string_literal_end(s: &str) -> Option<usize> {
    let mut escaped = false;
    for (i, c) in s.char_indices().skip(1) {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == '"' {
            return Some(i + 1);
        }
    }
    None
}

fn mentions_keys(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    lower.contains(&ENTAILED_KEY.to_ascii_lowercase()) || lower.contains(&OPPOSITE_KEY.to_ascii_lowercase())
}

fn relaxed(text: &str) -> Result<ParsedExpansion, ParseError> {
    Ok(ParsedExpansion {
        entailments: relaxed_list(text, ENTAILED_KEY)?,
        contradictions: relaxed_list(text, OPPOSITE_KEY)?,
    })
}

/// Extracts entailed and opposite descriptions from raw model output.
///
/// The last top-level object carrying one of the expected keys wins;
/// models often reason in prose before answering. Objects written in the
/// template's loose style (unquoted list items, missing commas between
/// keys) are read by a relaxed scanner, as are answers nested inside a
/// wrapper object. Items are trimmed and empty items dropped.
pub fn parse_expansion(llm_output: &str) -> Result<ParsedExpansion, ParseError> {
    let mut keyless = false;
    for (start, end) in object_spans(llm_output).into_iter().rev() {
        let region = &llm_output[start..end];
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(region) {
            if find_key(&obj, ENTAILED_KEY).is_none() && find_key(&obj, OPPOSITE_KEY).is_none() {
                keyless = true;
                continue;
            }
            return Ok(ParsedExpansion {
                entailments: strict_list(&obj, ENTAILED_KEY)?,
                contradictions: strict_list(&obj, OPPOSITE_KEY)?,
            });
        }
        if mentions_keys(region) {
            return relaxed(region);
        }
    }
    if mentions_keys(llm_output) {
        return relaxed(llm_output);
    }
    if keyless {
        return Err(ParseError::MissingKey(ENTAILED_KEY.into()));
    }
    Err(ParseError::NoJsonFound)
}

/// Non-fatal findings from validating an expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ExpansionWarning {
    /// A contradiction uses a plain negation.
    Negation { text: String, tokens: Vec<String> },
    /// A hypothesis repeated the premise and was dropped.
    PremiseCopy { text: String },
}

impl fmt::Display for ExpansionWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpansionWarning::Negation { text, tokens } => {
                write!(f, "contradiction {text:?} contains negation {tokens:?}")
            }
            ExpansionWarning::PremiseCopy { text } => write!(f, "dropped copy of premise {text:?}"),
        }
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Standalone negation words (`no`, `not`, `...n't`) in `text`.
pub fn negation_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '\u{2019}')
                .to_lowercase()
                .replace('\u{2019}', "'")
        })
        .filter(|w| w == "no" || w == "not" || w.ends_with("n't"))
        .collect()
}

/// Enforces the expansion-set invariants. Hypotheses identical to the
/// premise (up to whitespace) are dropped; negated contradictions are kept
/// and reported. Fails when no entailment survives.
pub fn validate(
    premise: &str,
    parsed: ParsedExpansion,
) -> Result<(ParsedExpansion, Vec<ExpansionWarning>), String> {
    let premise_norm = normalize_ws(premise);
    let mut warnings = Vec::new();
    let mut keep = |items: Vec<String>| -> Vec<String> {
        items
            .into_iter()
            .filter(|s| {
                if normalize_ws(s) == premise_norm {
                    warnings.push(ExpansionWarning::PremiseCopy { text: s.clone() });
                    false
                } else {
                    true
                }
            })
            .collect()
    };
    let entailments = keep(parsed.entailments);
    let contradictions = keep(parsed.contradictions);
    if entailments.is_empty() {
        return Err("no usable entailments".into());
    }
    for c in &contradictions {
        let tokens = negation_tokens(c);
        if !tokens.is_empty() {
            warnings.push(ExpansionWarning::Negation {
                text: c.clone(),
                tokens,
            });
        }
    }
    Ok((
        ParsedExpansion {
            entailments,
            contradictions,
        },
        warnings,
    ))
}

#[derive(Debug, Clone)]
pub struct ExpansionPolicy {
    pub max_attempts: u32,
    pub params: GenerateParams,
}

impl Default for ExpansionPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            params: GenerateParams::default(),
        }
    }
}

/// A validated expansion plus how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub set: ExpansionSet,
    pub attempts: u32,
    pub warnings: Vec<ExpansionWarning>,
}

/// Renders the prompt, calls the model and parses its answer, re-asking
/// with the same prompt when the answer cannot be parsed or validated.
/// Transport errors end the attempt loop at once; the client has its own
/// retry schedule.
pub fn expand_caption(
    caption: &str,
    llm: &dyn LlmClient,
    template: &PromptTemplate,
    policy: &ExpansionPolicy,
) -> Result<Expansion, ExpansionError> {
    let prompt = template.render(caption)?;
    let premise = caption.trim();
    let max_attempts = policy.max_attempts.max(1);
    let mut reason = String::new();
    for attempt in 1..=max_attempts {
        let output = llm
            .generate_text(&prompt, &policy.params)
            .map_err(|source| ExpansionError::Gateway {
                attempts: attempt,
                source,
            })?;
        let parsed = match parse_expansion(&output) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("expansion attempt {attempt} for {premise:?}: {e}");
                reason = e.to_string();
                continue;
            }
        };
        match validate(premise, parsed) {
            Ok((clean, warnings)) => {
                for w in &warnings {
                    log::warn!("{premise:?}: {w}");
                }
                return Ok(Expansion {
                    set: ExpansionSet {
                        premise: premise.to_string(),
                        entailments: clean.entailments,
                        contradictions: clean.contradictions,
                        llm_model: llm.model().to_string(),
                        prompt_hash: template.hash().to_string(),
                    },
                    attempts: attempt,
                    warnings,
                });
            }
            Err(e) => reason = e,
        }
    }
    Err(ExpansionError::Failed {
        attempts: max_attempts,
        reason,
    })
}

/// Case-folded, punctuation-stripped, whitespace-split token set.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Jaccard index of the two token sets; two empty sets score 1.
pub fn jaccard_similarity(a: &str, b: &str) -> f64 {
    jaccard_sets(&tokens(a), &tokens(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiversity {
    pub premise: String,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mean_jaccard_vs_premise: f64,
    pub per_sample: Vec<SampleDiversity>,
}

/// Jaccard between each premise and the pooled tokens of all its
/// hypotheses, averaged over samples.
pub fn diversity_report(sets: &[ExpansionSet]) -> Result<DiversityReport, ExpansionError> {
    if sets.is_empty() {
        return Err(ExpansionError::EmptyInput);
    }
    let per_sample: Vec<SampleDiversity> = sets
        .iter()
        .map(|s| {
            let pooled: BTreeSet<String> = s
                .entailments
                .iter()
                .chain(&s.contradictions)
                .flat_map(|t| tokens(t))
                .collect();
            SampleDiversity {
                premise: s.premise.clone(),
                jaccard: jaccard_sets(&tokens(&s.premise), &pooled),
            }
        })
        .collect();
    let mean = per_sample.iter().map(|s| s.jaccard).sum::<f64>() / per_sample.len() as f64;
    Ok(DiversityReport {
        mean_jaccard_vs_premise: mean,
        per_sample,
    })
}
