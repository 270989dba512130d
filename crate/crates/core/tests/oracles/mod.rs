//! Brute-force reference implementations, written from the definitions
//! and kept deliberately naive. Shared by several test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use capex::scoring::TripleScores;

pub fn triple(s_ent: f64, s_cnt: f64, s_cap: f64) -> TripleScores {
    TripleScores {
        premise: "p".into(),
        image_id: "i".into(),
        s_ent: Some(s_ent),
        s_cnt: Some(s_cnt),
        s_cap,
        m_ent: 1,
        m_cnt: 1,
        per_item: vec![],
        model_ec: Some("m".into()),
        model_cap: "m".into(),
    }
}

/// Weighted mix of entailment, contradiction and caption scores.
pub fn balance_oracle(s_ent: f64, s_cnt: f64, s_cap: f64, a1: f64, a2: f64) -> f64 {
    let expansions = a1 * s_ent + (1.0 - a1) * s_cnt;
    a2 * expansions + (1.0 - a2) * s_cap
}

/// `(text, image, group)` correctness of one 2x2 matrix, where `s[j][k]`
/// scores caption `j` against image `k` and ties never count.
pub fn retrieval_oracle(s: &[[f64; 2]; 2]) -> (bool, bool, bool) {
    let text = s[0][0] > s[1][0] && s[1][1] > s[0][1];
    let image = s[0][0] > s[0][1] && s[1][1] > s[1][0];
    (text, image, text && image)
}

pub fn auroc_oracle(pairs: &[(f64, bool)]) -> f64 {
    let (mut wins, mut count) = (0.0, 0.0);
    for &(p, _) in pairs.iter().filter(|x| x.1) {
        for &(n, _) in pairs.iter().filter(|x| !x.1) {
            count += 1.0;
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / count
}

pub fn pairwise_oracle(items: &[(f64, f64)]) -> Option<f64> {
    let (mut agree, mut total) = (0.0, 0.0);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let (si, ri) = items[i];
            let (sj, rj) = items[j];
            if ri == rj {
                continue;
            }
            total += 1.0;
            let prod = (si - sj) * (ri - rj);
            agree += if prod > 0.0 { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    (total > 0.0).then(|| agree / total)
}

pub fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Tau-b over all pairs; `None` when either side is constant.
pub fn kendall_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 {
                tx += 1.0;
            }
            if dy == 0.0 {
                ty += 1.0;
            }
            if dx * dy > 0.0 {
                conc += 1.0;
            } else if dx * dy < 0.0 {
                disc += 1.0;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    (denom > 0.0).then(|| (conc - disc) / denom)
}

/// Jaccard for text made only of lower-case words and single spaces.
pub fn plain_jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<&str> = a.split(' ').filter(|w| !w.is_empty()).collect();
    let b: BTreeSet<&str> = b.split(' ').filter(|w| !w.is_empty()).collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}
