//! Yes/no question formatting and per-hypothesis likelihood scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::ExpansionSet;
use crate::gateway::{GatewayError, ImageInput, LikelihoodMode, VlmClient};

/// Question wording. The grammar is deliberately left as is: the model's
/// yes/no likelihood is sensitive to the exact surface form.
pub const DEFAULT_QUESTION_TEMPLATE: &str = "Does \"{text}\" can be observed in the image? Answer yes or no.";

pub const TEXT_PLACEHOLDER: &str = "{text}";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("text to score is empty")]
    EmptyText,
    #[error("expansion has no entailments")]
    EmptyEntailments,
    #[error("invalid question template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    ExpectYes,
    ExpectNo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionForm {
    pub source_text: String,
    pub question: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuestionTemplate(String);

impl QuestionTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, ScoringError> {
        let template = template.into();
        match template.matches(TEXT_PLACEHOLDER).count() {
            1 => Ok(Self(template)),
            n => Err(ScoringError::InvalidTemplate(format!(
                "expected exactly one {TEXT_PLACEHOLDER}, found {n}"
            ))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn question(&self, text: &str, polarity: Polarity) -> Result<QuestionForm, ScoringError> {
        if text.trim().is_empty() {
            return Err(ScoringError::EmptyText);
        }
        Ok(QuestionForm {
            source_text: text.to_string(),
            question: self.0.replacen(TEXT_PLACEHOLDER, text, 1),
            polarity,
        })
    }
}

impl Default for QuestionTemplate {
    fn default() -> Self {
        Self(DEFAULT_QUESTION_TEMPLATE.to_string())
    }
}

impl TryFrom<String> for QuestionTemplate {
    type Error = ScoringError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<QuestionTemplate> for String {
    fn from(t: QuestionTemplate) -> Self {
        t.0
    }
}

/// Formats `text` with the default question template.
pub fn format_question(text: &str, polarity: Polarity) -> Result<QuestionForm, ScoringError> {
    QuestionTemplate::default().question(text, polarity)
}

/// How hypotheses are turned into likelihood queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoringContext {
    pub template: QuestionTemplate,
    pub mode: LikelihoodMode,
}

/// P("yes") for an entailed hypothesis.
pub fn score_entailment(
    ctx: &ScoringContext,
    vlm: &dyn VlmClient,
    image: &ImageInput,
    entailment: &str,
) -> Result<f64, ScoringError> {
    let q = ctx.template.question(entailment, Polarity::ExpectYes)?;
    Ok(vlm.query_likelihood(image, &q.question, ctx.mode)?.p_yes)
}

/// P("no") for a contradicting hypothesis, i.e. `1 - P("yes")`.
pub fn score_contradiction(
    ctx: &ScoringContext,
    vlm: &dyn VlmClient,
    image: &ImageInput,
    contradiction: &str,
) -> Result<f64, ScoringError> {
    let q = ctx.template.question(contradiction, Polarity::ExpectNo)?;
    Ok(vlm.query_likelihood(image, &q.question, ctx.mode)?.p_no)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Entailment,
    Contradiction,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub text: String,
    pub role: Role,
    pub score: f64,
}

/// Entailment, contradiction and caption scores for one (caption, image).
///
/// `s_ent` is absent only for caption-only scoring; `s_cnt` is absent when
/// the expansion produced no contradictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleScores {
    pub premise: String,
    pub image_id: String,
    pub s_ent: Option<f64>,
    pub s_cnt: Option<f64>,
    pub s_cap: f64,
    pub m_ent: usize,
    pub m_cnt: usize,
    pub per_item: Vec<ItemScore>,
    pub model_ec: Option<String>,
    pub model_cap: String,
}

impl TripleScores {
    /// Whether `|E| != |C|` (including an empty C).
    pub fn is_asymmetric(&self) -> bool {
        self.s_ent.is_some() && self.m_ent != self.m_cnt
    }
}

/// Mean with summation over sorted values, so the result does not depend
/// on the order items completed in.
pub fn stable_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Some(mean.clamp(0.0, 1.0))
}

/// Scores every hypothesis of `x` against `image`.
///
/// Entailments and contradictions go to `vlm_ec`, the premise itself to
/// `vlm_cap`; passing two different endpoints gives the split-model
/// ensemble. Item queries run concurrently.
pub fn score_triple(
    ctx: &ScoringContext,
    x: &ExpansionSet,
    image: &ImageInput,
    vlm_ec: &dyn VlmClient,
    vlm_cap: &dyn VlmClient,
) -> Result<TripleScores, ScoringError> {
    if x.entailments.is_empty() {
        return Err(ScoringError::EmptyEntailments);
    }
    let jobs: Vec<(&str, Role)> = x
        .entailments
        .iter()
        .map(|e| (e.as_str(), Role::Entailment))
        .chain(x.contradictions.iter().map(|c| (c.as_str(), Role::Contradiction)))
        .chain(std::iter::once((x.premise.as_str(), Role::Caption)))
        .collect();
    let per_item = jobs
        .par_iter()
        .map(|&(text, role)| {
            let score = match role {
                Role::Entailment => score_entailment(ctx, vlm_ec, image, text)?,
                Role::Contradiction => score_contradiction(ctx, vlm_ec, image, text)?,
                Role::Caption => score_entailment(ctx, vlm_cap, image, text)?,
            };
            Ok(ItemScore {
                text: text.to_string(),
                role,
                score,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;
    let of = |role: Role| -> Vec<f64> {
        per_item.iter().filter(|i| i.role == role).map(|i| i.score).collect()
    };
    let s_cap = of(Role::Caption)[0];
    Ok(TripleScores {
        premise: x.premise.clone(),
        image_id: image.id().to_string(),
        s_ent: stable_mean(&of(Role::Entailment)),
        s_cnt: stable_mean(&of(Role::Contradiction)),
        s_cap,
        m_ent: x.entailments.len(),
        m_cnt: x.contradictions.len(),
        per_item,
        model_ec: Some(vlm_ec.model().to_string()),
        model_cap: vlm_cap.model().to_string(),
    })
}

/// Scores only the premise; used when expansion failed.
pub fn score_caption_only(
    ctx: &ScoringContext,
    premise: &str,
    image: &ImageInput,
    vlm_cap: &dyn VlmClient,
) -> Result<TripleScores, ScoringError> {
    let s_cap = score_entailment(ctx, vlm_cap, image, premise)?;
    Ok(TripleScores {
        premise: premise.to_string(),
        image_id: image.id().to_string(),
        s_ent: None,
        s_cnt: None,
        s_cap,
        m_ent: 0,
        m_cnt: 0,
        per_item: vec![ItemScore {
            text: premise.to_string(),
            role: Role::Caption,
            score: s_cap,
        }],
        model_ec: None,
        model_cap: vlm_cap.model().to_string(),
    })
}
