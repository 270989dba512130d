//! Evaluation metrics: paired retrieval scores with tag breakdowns, and
//! agreement measures against human ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::{RatingScale, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no input")]
    EmptyInput,
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("no pair of items has distinct ratings")]
    NoComparablePairs,
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("all values tied; rank correlation undefined")]
    AllTied,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} points")]
    TooFewPoints(usize),
    #[error("non-finite value in input")]
    NonFinite,
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(), MetricError> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NonFinite)
    }
}

/// Text, image and group scores in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_tag: BTreeMap<String, RetrievalMetrics>,
}

impl RetrievalMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "text_score" => Some(self.text_score),
            "image_score" => Some(self.image_score),
            "group_score" => Some(self.group_score),
            _ => None,
        }
    }
}

pub const RETRIEVAL_METRIC_NAMES: [&str; 3] = ["text_score", "image_score", "group_score"];

/// Per-example outcome of the paired retrieval protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalOutcome {
    pub text: bool,
    pub image: bool,
    pub group: bool,
}

/// `s[j][k]` scores caption `j` against image `k`; the diagonal matches.
/// Comparisons are strict, so ties count as failures.
pub fn retrieval_outcome(s: &[[f64; 2]; 2]) -> RetrievalOutcome {
    let text = s[0][0] > s[1][0] && s[1][1] > s[0][1];
    let image = s[0][0] > s[0][1] && s[1][1] > s[1][0];
    RetrievalOutcome {
        text,
        image,
        group: text && image,
    }
}

fn summarize<'a>(matrices: impl Iterator<Item = &'a ScoreMatrix>) -> RetrievalMetrics {
    let (mut n, mut text, mut image, mut group) = (0usize, 0usize, 0usize, 0usize);
    for m in matrices {
        let o = retrieval_outcome(&m.s);
        n += 1;
        text += o.text as usize;
        image += o.image as usize;
        group += o.group as usize;
    }
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    RetrievalMetrics {
        text_score: pct(text),
        image_score: pct(image),
        group_score: pct(group),
        n,
        per_tag: BTreeMap::new(),
    }
}

/// Retrieval scores over all matrices, plus one breakdown per tag when
/// `tags` maps example ids to labels. An example carrying several tags
/// counts once in each of them.
pub fn retrieval_metrics(
    matrices: &[ScoreMatrix],
    tags: Option<&BTreeMap<String, BTreeSet<String>>>,
) -> Result<RetrievalMetrics, MetricError> {
    if matrices.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut overall = summarize(matrices.iter());
    if let Some(tags) = tags {
        let labels: BTreeSet<&String> = matrices
            .iter()
            .filter_map(|m| tags.get(&m.example_id))
            .flatten()
            .collect();
        for label in labels {
            let subset = matrices
                .iter()
                .filter(|m| tags.get(&m.example_id).is_some_and(|t| t.contains(label)));
            overall.per_tag.insert(label.clone(), summarize(subset));
        }
    }
    Ok(overall)
}

/// Area under the ROC curve in its Mann-Whitney form: the chance that a
/// random positive outscores a random negative, ties counting one half.
pub fn auroc(pairs: &[(f64, bool)]) -> Result<f64, MetricError> {
    check_finite(pairs.iter().map(|(s, _)| s))?;
    let n_pos = pairs.iter().filter(|(_, l)| *l).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if pairs[k].1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of item pairs with distinct human ratings whose scores are
/// ordered the same way; tied scores count one half.
pub fn pairwise_accuracy(items: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_finite(items.iter().flat_map(|(s, r)| [s, r]))?;
    if items.len() < 2 {
        return Err(MetricError::NoComparablePairs);
    }
    let mut by_rating = items.to_vec();
    by_rating.sort_by(|a, b| a.1.total_cmp(&b.1));
    // scores of all items with a strictly lower rating, kept sorted
    let mut lower: Vec<f64> = Vec::with_capacity(items.len());
    let (mut agree, mut ties, mut total) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < by_rating.len() {
        let mut end = start;
        while end < by_rating.len() && by_rating[end].1 == by_rating[start].1 {
            end += 1;
        }
        for &(score, _) in &by_rating[start..end] {
            let below = lower.partition_point(|&p| p < score) as u64;
            let at = lower.partition_point(|&p| p <= score) as u64 - below;
            agree += below;
            ties += at;
            total += lower.len() as u64;
        }
        lower.extend(by_rating[start..end].iter().map(|(s, _)| *s));
        lower.sort_by(f64::total_cmp);
        start = end;
    }
    if total == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok((agree as f64 + 0.5 * ties as f64) / total as f64)
}

/// Fraction of items where `score > threshold` agrees with the label. A
/// score exactly at the threshold is classified negative.
pub fn binary_accuracy(items: &[(f64, bool)], threshold: f64) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let correct = items.iter().filter(|(s, l)| (*s > threshold) == *l).count();
    Ok(correct as f64 / items.len() as f64)
}

pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.5;

fn paired(xs: &[f64], ys: &[f64], min: usize) -> Result<(), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < min {
        return Err(MetricError::TooFewPoints(min));
    }
    check_finite(xs.iter().chain(ys))
}

/// Pearson product-moment correlation, accumulated in one pass with
/// running co-moments.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    paired(xs, ys, 2)?;
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (k + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn tie_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting strict inversions.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Kendall's tau-b, computed with Knight's O(n log n) method.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    paired(xs, ys, 2)?;
    let n = xs.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let x_ties = tie_pairs(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
    let joint_ties = tie_pairs(&pts);
    let mut y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(y.len());
    let swaps = count_inversions(&mut y, &mut buf);
    let y_ties = tie_pairs(&y);
    if n0 == x_ties || n0 == y_ties {
        return Err(MetricError::AllTied);
    }
    let s = n0 as f64 - x_ties as f64 - y_ties as f64 + joint_ties as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - x_ties) as f64).sqrt() * ((n0 - y_ties) as f64).sqrt();
    Ok((s / denom).clamp(-1.0, 1.0))
}

/// Agreement between balanced scores and human ratings. Each metric is
/// absent when undefined for the input (e.g. zero variance).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatedMetrics {
    pub n: usize,
    pub pearson: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub auroc: Option<f64>,
    pub pairwise_accuracy: Option<f64>,
    pub binary_accuracy: Option<f64>,
}

impl RatedMetrics {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("pearson", self.pearson),
            ("kendall_tau", self.kendall_tau),
            ("auroc", self.auroc),
            ("pairwise_accuracy", self.pairwise_accuracy),
            ("binary_accuracy", self.binary_accuracy),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Correlations for any scale; AUROC and binary accuracy for binary
/// labels; pairwise accuracy for Likert ratings.
pub fn rated_metrics(items: &[(f64, f64)], scale: RatingScale) -> Result<RatedMetrics, MetricError> {
    if items.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let scores: Vec<f64> = items.iter().map(|i| i.0).collect();
    let ratings: Vec<f64> = items.iter().map(|i| i.1).collect();
    let mut m = RatedMetrics {
        n: items.len(),
        pearson: pearson(&scores, &ratings).ok(),
        kendall_tau: kendall_tau(&scores, &ratings).ok(),
        ..Default::default()
    };
    match scale {
        RatingScale::Binary => {
            let labelled: Vec<(f64, bool)> = items.iter().map(|&(s, r)| (s, r >= 0.5)).collect();
            m.auroc = auroc(&labelled).ok();
            m.binary_accuracy = binary_accuracy(&labelled, DEFAULT_BINARY_THRESHOLD).ok();
        }
        RatingScale::Likert1To5 => {
            m.pairwise_accuracy = pairwise_accuracy(items).ok();
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Pair,
    Rated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradedCounts {
    pub full: usize,
    pub no_contradictions: usize,
    pub caption_only: usize,
    pub failed: usize,
    /// Cells whose entailment and contradiction sets differ in size.
    pub asymmetric: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub llm: String,
    pub vlm_ec: String,
    pub vlm_cap: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub prompt_hash: String,
    pub question_template: String,
    pub mode: String,
    pub ensemble: bool,
}

/// Metrics for one benchmark run with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub benchmark: String,
    pub kind: BenchmarkKind,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated: Option<RatedMetrics>,
    pub degraded: DegradedCounts,
    pub provenance: Provenance,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    fn retrieval_rows(r: &RetrievalMetrics) -> Vec<(String, &RetrievalMetrics)> {
        std::iter::once(("all".to_string(), r))
            .chain(r.per_tag.iter().map(|(k, v)| (k.clone(), v)))
            .collect()
    }

    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let p = &self.provenance;
        let _ = writeln!(out, "benchmark: {} ({} examples)", self.benchmark, self.n);
        let _ = writeln!(
            out,
            "models: llm={} vlm_ec={} vlm_cap={}  alpha1={} alpha2={}  mode={}{}",
            p.llm,
            p.vlm_ec,
            p.vlm_cap,
            p.alpha1,
            p.alpha2,
            p.mode,
            if p.ensemble { "  ensemble" } else { "" }
        );
        if let Some(r) = &self.retrieval {
            let rows = Self::retrieval_rows(r);
            let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(6);
            let _ = writeln!(out, "{:<w$}  {:>6}  {:>7}  {:>7}  {:>7}", "subset", "n", "text", "image", "group");
            for (name, m) in rows {
                let _ = writeln!(
                    out,
                    "{:<w$}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}",
                    name, m.n, m.text_score, m.image_score, m.group_score
                );
            }
        }
        if let Some(r) = &self.rated {
            let _ = writeln!(out, "{:<18}  {:>8}", "metric", "value");
            for (k, v) in r.entries() {
                let _ = writeln!(out, "{k:<18}  {v:>8.4}");
            }
        }
        let d = &self.degraded;
        let _ = writeln!(
            out,
            "cells: full={} no_contradictions={} caption_only={} failed={} asymmetric={}",
            d.full, d.no_contradictions, d.caption_only, d.failed, d.asymmetric
        );
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.retrieval {
            out.push_str("subset,n,text_score,image_score,group_score\n");
            for (name, m) in Self::retrieval_rows(r) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    csv_field(&name),
                    m.n,
                    m.text_score,
                    m.image_score,
                    m.group_score
                );
            }
        }
        if let Some(r) = &self.rated {
            out.push_str("metric,value\n");
            for (k, v) in r.entries() {
                let _ = writeln!(out, "{k},{v}");
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Degradation;

    fn matrix(id: &str, s: [[f64; 2]; 2]) -> ScoreMatrix {
        ScoreMatrix {
            example_id: id.into(),
            s,
            degraded: [[Degradation::Full; 2]; 2],
        }
    }

    #[test]
    fn dominant_diagonal() {
        let m = retrieval_metrics(&[matrix("a", [[0.9, 0.2], [0.1, 0.8]])], None).unwrap();
        assert_eq!((m.text_score, m.image_score, m.group_score), (100.0, 100.0, 100.0));
    }

    #[test]
    fn ties_fail() {
        let m = retrieval_metrics(&[matrix("a", [[0.5; 2]; 2])], None).unwrap();
        assert_eq!((m.text_score, m.image_score, m.group_score), (0.0, 0.0, 0.0));
    }

    #[test]
    fn text_without_image() {
        // each image picks its caption, but caption 0 prefers image 1
        let o = retrieval_outcome(&[[0.6, 0.7], [0.1, 0.8]]);
        assert!(o.text && !o.image && !o.group);
    }

    #[test]
    fn per_tag_counts_multi_tag_examples_in_each() {
        let ms = [
            matrix("a", [[0.9, 0.2], [0.1, 0.8]]),
            matrix("b", [[0.1, 0.2], [0.9, 0.8]]),
        ];
        let tags = BTreeMap::from([
            ("a".to_string(), BTreeSet::from(["object".to_string(), "relation".to_string()])),
            ("b".to_string(), BTreeSet::from(["relation".to_string()])),
        ]);
        let m = retrieval_metrics(&ms, Some(&tags)).unwrap();
        assert_eq!(m.group_score, 50.0);
        assert_eq!(m.per_tag["object"].n, 1);
        assert_eq!(m.per_tag["object"].group_score, 100.0);
        assert_eq!(m.per_tag["relation"].n, 2);
        assert_eq!(m.per_tag["relation"].group_score, 50.0);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(retrieval_metrics(&[], None), Err(MetricError::EmptyInput));
        assert_eq!(binary_accuracy(&[], 0.5), Err(MetricError::EmptyInput));
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[(0.9, true), (0.8, true), (0.1, false)]), Ok(1.0));
        assert_eq!(auroc(&[(0.3, true), (0.3, false), (0.3, true)]), Ok(0.5));
        assert_eq!(auroc(&[(0.3, true)]), Err(MetricError::DegenerateLabels));
    }

    #[test]
    fn pairwise_cases() {
        assert_eq!(pairwise_accuracy(&[(0.1, 1.0), (0.9, 5.0)]), Ok(1.0));
        assert_eq!(pairwise_accuracy(&[(0.9, 1.0), (0.1, 5.0)]), Ok(0.0));
        assert_eq!(pairwise_accuracy(&[(0.5, 1.0), (0.5, 5.0)]), Ok(0.5));
        assert_eq!(pairwise_accuracy(&[(0.1, 3.0), (0.9, 3.0)]), Err(MetricError::NoComparablePairs));
    }

    #[test]
    fn binary_accuracy_cases() {
        assert_eq!(binary_accuracy(&[(0.9, true), (0.1, false)], 0.5), Ok(1.0));
        assert_eq!(binary_accuracy(&[(0.9, false), (0.1, true)], 0.5), Ok(0.0));
        assert_eq!(binary_accuracy(&[(0.5, false)], 0.5), Ok(1.0));
        assert_eq!(binary_accuracy(&[(0.5, true)], 0.5), Ok(0.0));
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ZeroVariance));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(MetricError::TooFewPoints(2)));
    }

    #[test]
    fn kendall_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x), Ok(1.0));
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]), Ok(-1.0));
        assert_eq!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::AllTied));
    }

    #[test]
    fn rated_by_scale() {
        let items = [(0.1, 0.0), (0.8, 1.0), (0.7, 1.0), (0.2, 0.0)];
        let m = rated_metrics(&items, RatingScale::Binary).unwrap();
        assert_eq!(m.auroc, Some(1.0));
        assert_eq!(m.binary_accuracy, Some(1.0));
        assert_eq!(m.pairwise_accuracy, None);
        let likert = [(0.1, 1.0), (0.8, 5.0), (0.5, 3.0)];
        let m = rated_metrics(&likert, RatingScale::Likert1To5).unwrap();
        assert_eq!(m.pairwise_accuracy, Some(1.0));
        assert_eq!(m.auroc, None);
    }

    #[test]
    fn csv_escaping() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
