//! Two-stage balancing of entailment, contradiction and caption scores,
//! split-model ensembling, and pure recombination sweeps over cached
//! triples.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::{RatingScale, ScoreMatrix};
use crate::metrics::{self, MetricError, RetrievalMetrics, RETRIEVAL_METRIC_NAMES};
use crate::scoring::TripleScores;

pub const DEFAULT_ALPHA1: f64 = 0.5;
pub const DEFAULT_ALPHA2: f64 = 0.6;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("alpha {name} = {value} is outside [0, 1]")]
    AlphaOutOfRange { name: &'static str, value: f64 },
    #[error("triples describe different examples: {0}")]
    MismatchedExample(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Which endpoint scores hypotheses and which scores the caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub vlm_ec: String,
    pub vlm_cap: String,
}

impl Default for Routing {
    fn default() -> Self {
        Self {
            vlm_ec: "vlm".into(),
            vlm_cap: "vlm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// Weight of entailments against contradictions.
    pub alpha1: f64,
    /// Weight of the expansion balance against the original caption.
    pub alpha2: f64,
    #[serde(default)]
    pub routing: Routing,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            routing: Routing::default(),
        }
    }
}

impl BalanceConfig {
    pub fn with_alphas(alpha1: f64, alpha2: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        for (name, value) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AggregationError::AlphaOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// How much of the full score was available for a cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    #[default]
    Full,
    /// No contradictions; the expansion balance is the entailment score.
    NoContradictions,
    /// Expansion failed; the value is the caption score alone.
    CaptionOnly,
    /// Not even the caption could be scored; the value is 0.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub s_ent: Option<f64>,
    pub s_cnt: Option<f64>,
    pub s_cap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedScore {
    pub value: f64,
    /// `alpha1 * s_ent + (1 - alpha1) * s_cnt`, absent in caption-only mode.
    pub inner: Option<f64>,
    pub components: Components,
    pub alpha1: f64,
    pub alpha2: f64,
    pub degraded: Degradation,
}

fn combine(
    alpha1: f64,
    alpha2: f64,
    s_ent: Option<f64>,
    s_cnt: Option<f64>,
    s_cap: f64,
) -> BalancedScore {
    let components = Components {
        s_ent,
        s_cnt,
        s_cap: Some(s_cap),
    };
    let (inner, degraded) = match (s_ent, s_cnt) {
        (None, _) => (None, Degradation::CaptionOnly),
        (Some(e), None) => (Some(e), Degradation::NoContradictions),
        (Some(e), Some(c)) => (Some(alpha1 * e + (1.0 - alpha1) * c), Degradation::Full),
    };
    let value = match inner {
        Some(inner) => alpha2 * inner + (1.0 - alpha2) * s_cap,
        None => s_cap,
    };
    BalancedScore {
        value: value.clamp(0.0, 1.0),
        inner,
        components,
        alpha1,
        alpha2,
        degraded,
    }
}

/// `alpha2 * [alpha1 * s_ent + (1 - alpha1) * s_cnt] + (1 - alpha2) * s_cap`.
///
/// Missing contradictions make the bracket `s_ent`; a missing expansion
/// makes the whole value `s_cap`. Either case is recorded in `degraded`.
pub fn balance(t: &TripleScores, cfg: &BalanceConfig) -> BalancedScore {
    combine(cfg.alpha1, cfg.alpha2, t.s_ent, t.s_cnt, t.s_cap)
}

/// Like [`balance`], but a cell without any scores becomes a failed 0.
pub fn balance_cell(t: Option<&TripleScores>, cfg: &BalanceConfig) -> BalancedScore {
    match t {
        Some(t) => balance(t, cfg),
        None => BalancedScore {
            value: 0.0,
            inner: None,
            components: Components {
                s_ent: None,
                s_cnt: None,
                s_cap: None,
            },
            alpha1: cfg.alpha1,
            alpha2: cfg.alpha2,
            degraded: Degradation::Failed,
        },
    }
}

/// Balances hypothesis scores from `a` with the caption score from `b`.
pub fn ensemble_routes(
    a: &TripleScores,
    b: &TripleScores,
    cfg: &BalanceConfig,
) -> Result<BalancedScore, AggregationError> {
    if a.premise != b.premise || a.image_id != b.image_id {
        return Err(AggregationError::MismatchedExample(format!(
            "({:?}, {}) vs ({:?}, {})",
            a.premise, a.image_id, b.premise, b.image_id
        )));
    }
    Ok(combine(cfg.alpha1, cfg.alpha2, a.s_ent, a.s_cnt, b.s_cap))
}

/// Cached triples for one paired example; `cells[j][k]` is caption `j`
/// against image `k`, `None` when nothing could be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTriples {
    pub example_id: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub cells: [[Option<TripleScores>; 2]; 2],
}

impl PairTriples {
    pub fn matrix(&self, cfg: &BalanceConfig) -> ScoreMatrix {
        self.matrix_with(|t| balance_cell(t, cfg))
    }

    fn matrix_with(&self, f: impl Fn(Option<&TripleScores>) -> BalancedScore) -> ScoreMatrix {
        let cell = |j: usize, k: usize| f(self.cells[j][k].as_ref());
        let b = [[cell(0, 0), cell(0, 1)], [cell(1, 0), cell(1, 1)]];
        ScoreMatrix {
            example_id: self.example_id.clone(),
            s: b.map(|row| row.map(|c| c.value)),
            degraded: b.map(|row| row.map(|c| c.degraded)),
        }
    }
}

/// Cached triple for one rated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedTriple {
    pub id: String,
    pub human_rating: f64,
    pub rating_scale: RatingScale,
    pub triple: Option<TripleScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

impl Grid {
    pub fn new(alpha1: Vec<f64>, alpha2: Vec<f64>) -> Result<Self, AggregationError> {
        if alpha1.is_empty() || alpha2.is_empty() {
            return Err(AggregationError::EmptyGrid);
        }
        for cfg in alpha1
            .iter()
            .flat_map(|&a| alpha2.iter().map(move |&b| BalanceConfig::with_alphas(a, b)))
        {
            cfg.validate()?;
        }
        Ok(Self { alpha1, alpha2 })
    }

    /// `steps` evenly spaced values from 0 to 1 on both axes.
    pub fn uniform(steps: usize) -> Result<Self, AggregationError> {
        let axis: Vec<f64> = match steps {
            0 => vec![],
            1 => vec![0.0],
            n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        };
        Self::new(axis.clone(), axis)
    }

    pub fn len(&self) -> usize {
        self.alpha1.len() * self.alpha2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha1: f64,
    pub alpha2: f64,
    pub metric_name: String,
    pub value: f64,
}

/// Evaluates `metric` at every grid point, alpha1-major. The routing of
/// `base` is kept; only the weights change.
pub fn alpha_sweep<F>(grid: &Grid, base: &BalanceConfig, mut metric: F) -> Result<Vec<SweepRow>, AggregationError>
where
    F: FnMut(&BalanceConfig) -> Result<Vec<(String, f64)>, AggregationError>,
{
    if grid.is_empty() {
        return Err(AggregationError::EmptyGrid);
    }
    let mut rows = Vec::new();
    for &alpha1 in &grid.alpha1 {
        for &alpha2 in &grid.alpha2 {
            let cfg = BalanceConfig {
                alpha1,
                alpha2,
                routing: base.routing.clone(),
            };
            for (metric_name, value) in metric(&cfg)? {
                rows.push(SweepRow {
                    alpha1,
                    alpha2,
                    metric_name,
                    value,
                });
            }
        }
    }
    Ok(rows)
}

/// Retrieval metrics for every grid point over cached paired triples.
/// `metric_names` selects among `text_score`, `image_score`, `group_score`.
pub fn sweep_pairs(
    pairs: &[PairTriples],
    grid: &Grid,
    base: &BalanceConfig,
    metric_names: &[&str],
) -> Result<Vec<SweepRow>, AggregationError> {
    alpha_sweep(grid, base, |cfg| {
        let matrices: Vec<ScoreMatrix> = pairs.iter().map(|p| p.matrix(cfg)).collect();
        let m = metrics::retrieval_metrics(&matrices, None)?;
        Ok(metric_names
            .iter()
            .filter_map(|name| m.get(name).map(|v| (name.to_string(), v)))
            .collect())
    })
}

/// Agreement metrics for every grid point over cached rated triples.
/// An empty `metric_names` keeps every metric defined for the data.
pub fn sweep_rated(
    items: &[RatedTriple],
    grid: &Grid,
    base: &BalanceConfig,
    metric_names: &[&str],
) -> Result<Vec<SweepRow>, AggregationError> {
    let scale = items
        .first()
        .map(|i| i.rating_scale)
        .ok_or(MetricError::EmptyInput)?;
    alpha_sweep(grid, base, |cfg| {
        let pairs: Vec<(f64, f64)> = items
            .iter()
            .map(|i| (balance_cell(i.triple.as_ref(), cfg).value, i.human_rating))
            .collect();
        let m = metrics::rated_metrics(&pairs, scale)?;
        Ok(m.entries()
            .into_iter()
            .filter(|(k, _)| metric_names.is_empty() || metric_names.contains(k))
            .map(|(k, v)| (k.to_string(), v))
            .collect())
    })
}

/// Entailments only, entailments with contradictions, and the full score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub e_only: f64,
    pub e_plus_c: f64,
    pub e_c_caption: f64,
    pub degraded: Degradation,
}

fn ablation_row(t: Option<&TripleScores>, cfg: &BalanceConfig) -> AblationRow {
    let full = balance_cell(t, cfg);
    match (t, full.inner) {
        (Some(t), Some(inner)) => AblationRow {
            e_only: t.s_ent.unwrap_or(inner),
            e_plus_c: inner,
            e_c_caption: full.value,
            degraded: full.degraded,
        },
        // caption-only and failed cells have a single value to report
        _ => AblationRow {
            e_only: full.value,
            e_plus_c: full.value,
            e_c_caption: full.value,
            degraded: full.degraded,
        },
    }
}

pub fn component_ablation(triples: &[TripleScores], cfg: &BalanceConfig) -> Vec<AblationRow> {
    triples.iter().map(|t| ablation_row(Some(t), cfg)).collect()
}

pub const ABLATION_COLUMNS: [&str; 3] = ["E_only", "E_plus_C", "E_C_caption"];

/// Retrieval metrics for each ablation column over paired triples.
pub fn ablation_retrieval(
    pairs: &[PairTriples],
    cfg: &BalanceConfig,
) -> Result<Vec<(&'static str, RetrievalMetrics)>, AggregationError> {
    let pick: [fn(&AblationRow) -> f64; 3] = [|r| r.e_only, |r| r.e_plus_c, |r| r.e_c_caption];
    ABLATION_COLUMNS
        .iter()
        .zip(pick)
        .map(|(name, pick)| {
            let matrices: Vec<ScoreMatrix> = pairs
                .iter()
                .map(|p| {
                    p.matrix_with(|t| {
                        let row = ablation_row(t, cfg);
                        BalancedScore {
                            value: pick(&row),
                            inner: None,
                            components: Components {
                                s_ent: None,
                                s_cnt: None,
                                s_cap: None,
                            },
                            alpha1: cfg.alpha1,
                            alpha2: cfg.alpha2,
                            degraded: row.degraded,
                        }
                    })
                })
                .collect();
            Ok((*name, metrics::retrieval_metrics(&matrices, None)?))
        })
        .collect()
}

/// All metric names a paired sweep can produce.
pub fn retrieval_metric_names() -> &'static [&'static str] {
    &RETRIEVAL_METRIC_NAMES
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn triple(s_ent: Option<f64>, s_cnt: Option<f64>, s_cap: f64) -> TripleScores {
        TripleScores {
            premise: "p".into(),
            image_id: "i".into(),
            s_ent,
            s_cnt,
            s_cap,
            m_ent: s_ent.map_or(0, |_| 1),
            m_cnt: s_cnt.map_or(0, |_| 1),
            per_item: vec![],
            model_ec: None,
            model_cap: "m".into(),
        }
    }

    #[test]
    fn default_alphas() {
        let cfg = BalanceConfig::default();
        assert_eq!((cfg.alpha1, cfg.alpha2), (0.5, 0.6));
    }

    #[test]
    fn worked_example() {
        let b = balance(&triple(Some(0.8), Some(0.6), 0.9), &BalanceConfig::default());
        assert!((b.inner.unwrap() - 0.7).abs() < 1e-12);
        assert!((b.value - 0.78).abs() < 1e-12);
        assert_eq!(b.degraded, Degradation::Full);
    }

    #[test]
    fn boundaries() {
        let t = triple(Some(0.8), Some(0.6), 0.9);
        assert_eq!(balance(&t, &BalanceConfig::with_alphas(0.3, 0.0)).value, 0.9);
        assert_eq!(balance(&t, &BalanceConfig::with_alphas(1.0, 1.0)).value, 0.8);
    }

    #[test]
    fn degradations() {
        let cfg = BalanceConfig::default();
        let nc = balance(&triple(Some(0.8), None, 0.5), &cfg);
        assert_eq!(nc.degraded, Degradation::NoContradictions);
        assert_eq!(nc.inner, Some(0.8));
        let co = balance(&triple(None, None, 0.4), &cfg);
        assert_eq!(co.degraded, Degradation::CaptionOnly);
        assert_eq!(co.value, 0.4);
        let failed = balance_cell(None, &cfg);
        assert_eq!((failed.value, failed.degraded), (0.0, Degradation::Failed));
    }

    #[test]
    fn alpha_range_checked() {
        assert!(BalanceConfig::with_alphas(1.2, 0.5).validate().is_err());
        assert!(BalanceConfig::with_alphas(0.0, 1.0).validate().is_ok());
        assert!(Grid::new(vec![0.5], vec![-0.1]).is_err());
        assert!(matches!(Grid::new(vec![], vec![0.5]), Err(AggregationError::EmptyGrid)));
    }

    #[test]
    fn ensemble_example() {
        let a = triple(Some(0.8), Some(0.6), 0.1);
        let b = triple(Some(0.2), Some(0.2), 0.5);
        let v = ensemble_routes(&a, &b, &BalanceConfig::default()).unwrap().value;
        assert!((v - 0.62).abs() < 1e-12);
        let mut other = b.clone();
        other.image_id = "j".into();
        assert!(matches!(
            ensemble_routes(&a, &other, &BalanceConfig::default()),
            Err(AggregationError::MismatchedExample(_))
        ));
    }

    #[test]
    fn ablation_columns() {
        let t = triple(Some(0.8), Some(0.6), 0.9);
        let cfg = BalanceConfig::default();
        let row = component_ablation(std::slice::from_ref(&t), &cfg)[0];
        assert_eq!(row.e_only, 0.8);
        assert_eq!(row.e_plus_c, balance(&t, &cfg).inner.unwrap());
        assert_eq!(row.e_c_caption, balance(&t, &cfg).value);
        let ones = component_ablation(&[t], &BalanceConfig::with_alphas(1.0, 1.0))[0];
        assert_eq!((ones.e_only, ones.e_plus_c, ones.e_c_caption), (0.8, 0.8, 0.8));
    }

    #[test]
    fn uniform_grid() {
        let g = Grid::uniform(3).unwrap();
        assert_eq!(g.alpha1, vec![0.0, 0.5, 1.0]);
        assert_eq!(g.len(), 9);
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0..=1.0f64
    }

    proptest! {
        #[test]
        fn value_is_convex(e in unit(), c in unit(), cap in unit(), a1 in unit(), a2 in unit()) {
            let v = balance(&triple(Some(e), Some(c), cap), &BalanceConfig::with_alphas(a1, a2)).value;
            let lo = e.min(c).min(cap);
            let hi = e.max(c).max(cap);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn monotone_in_each_component(e in unit(), c in unit(), cap in unit(), a1 in unit(), a2 in unit(), bump in 0.0..=1.0f64) {
            let cfg = BalanceConfig::with_alphas(a1, a2);
            let base = balance(&triple(Some(e), Some(c), cap), &cfg).value;
            let up = |x: f64| (x + bump).min(1.0);
            prop_assert!(balance(&triple(Some(up(e)), Some(c), cap), &cfg).value >= base - 1e-15);
            prop_assert!(balance(&triple(Some(e), Some(up(c)), cap), &cfg).value >= base - 1e-15);
            prop_assert!(balance(&triple(Some(e), Some(c), up(cap)), &cfg).value >= base - 1e-15);
        }

        #[test]
        fn self_ensemble_is_balance(e in unit(), c in unit(), cap in unit(), a1 in unit(), a2 in unit()) {
            let t = triple(Some(e), Some(c), cap);
            let cfg = BalanceConfig::with_alphas(a1, a2);
            prop_assert_eq!(ensemble_routes(&t, &t, &cfg).unwrap(), balance(&t, &cfg));
        }
    }
}
