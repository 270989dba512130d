//! Builds model clients for a run, remote or offline.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use capex::benchmarks::Pipeline;
use capex::expansion::{ExpansionPolicy, PromptTemplate};
use capex::gateway::{
    question_hash, GenerateParams, HttpLlm, HttpVlm, ImageInput, LlmClient, MockLlm, MockVlm, VlmClient,
};
use capex::scoring::ScoringContext;
use capex::store::Store;
use serde::Deserialize;

use crate::config::{MockConfig, RunConfig};
use crate::error::CliError;

pub struct Backends {
    pub llm: Box<dyn LlmClient>,
    pub vlm_ec: Arc<dyn VlmClient>,
    pub vlm_cap: Arc<dyn VlmClient>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmLine {
    caption: String,
    completion: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VlmLine {
    image: Option<String>,
    image_id: Option<String>,
    question: Option<String>,
    question_hash: Option<String>,
    p_yes: f64,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::invalid("MissingFile", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CliError::invalid("SchemaViolation", format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

fn mock_llm(name: String, m: &MockConfig, template: &PromptTemplate) -> Result<MockLlm, CliError> {
    let mut llm = match &m.default_completion {
        Some(c) => MockLlm::canned(name, c.clone()),
        None => MockLlm::new(name),
    };
    if let Some(path) = &m.llm_responses {
        for line in read_lines::<LlmLine>(path)? {
            llm = llm.with_response(template.render(&line.caption)?, line.completion);
        }
    }
    Ok(llm)
}

fn mock_vlm(name: String, table: Option<&Path>, noise: Option<u64>, image_root: &Path) -> Result<MockVlm, CliError> {
    let mut scores: HashMap<(String, String), f64> = HashMap::new();
    if let Some(path) = table {
        for (i, line) in read_lines::<VlmLine>(path)?.into_iter().enumerate() {
            let bad = |msg: &str| {
                CliError::invalid("SchemaViolation", format!("{} entry {}: {msg}", path.display(), i + 1))
            };
            let image_id = match (line.image, line.image_id) {
                (Some(img), None) => ImageInput::from_path(image_root.join(img))?.id().to_string(),
                (None, Some(id)) => id,
                _ => return Err(bad("give exactly one of image, image_id")),
            };
            let qhash = match (line.question, line.question_hash) {
                (Some(q), None) => question_hash(&q),
                (None, Some(h)) => h,
                _ => return Err(bad("give exactly one of question, question_hash")),
            };
            scores.insert((image_id, qhash), line.p_yes);
        }
    }
    let vlm = capex::gateway::make_mock_vlm(name, scores)?;
    Ok(match noise {
        Some(seed) => vlm.with_noise(seed),
        None => vlm,
    })
}

impl Backends {
    /// Clients for `cfg`. Mock backends carry a `mock:` prefix in their
    /// model name so their records never mix with real ones in the store.
    pub fn build(cfg: &RunConfig, image_root: &Path) -> Result<Self, CliError> {
        let routing = &cfg.balance.routing;
        if let Some(m) = &cfg.mock {
            let llm = mock_llm(format!("mock:{}", cfg.llm), m, &cfg.template)?;
            let vlm_ec: Arc<dyn VlmClient> = Arc::new(mock_vlm(
                format!("mock:{}", routing.vlm_ec),
                m.vlm_table.as_deref(),
                m.noise_seed,
                image_root,
            )?);
            let vlm_cap: Arc<dyn VlmClient> = if routing.vlm_cap == routing.vlm_ec {
                vlm_ec.clone()
            } else {
                let table = m.caption_vlm_table.as_deref().or(m.vlm_table.as_deref());
                Arc::new(mock_vlm(format!("mock:{}", routing.vlm_cap), table, m.noise_seed, image_root)?)
            };
            return Ok(Self {
                llm: Box::new(llm),
                vlm_ec,
                vlm_cap,
            });
        }
        let endpoint = |name: &str| {
            cfg.endpoint(name)
                .cloned()
                .ok_or_else(|| CliError::invalid("ConfigInvalid", format!("endpoint {name:?} is not declared")))
        };
        let llm = HttpLlm::new(endpoint(&cfg.llm)?)?;
        let vlm_ec: Arc<dyn VlmClient> = Arc::new(HttpVlm::new(endpoint(&routing.vlm_ec)?)?);
        let vlm_cap: Arc<dyn VlmClient> = if routing.vlm_cap == routing.vlm_ec {
            vlm_ec.clone()
        } else {
            Arc::new(HttpVlm::new(endpoint(&routing.vlm_cap)?)?)
        };
        Ok(Self {
            llm: Box::new(llm),
            vlm_ec,
            vlm_cap,
        })
    }

    pub fn pipeline<'a>(&'a self, cfg: &RunConfig, store: &'a Store) -> Pipeline<'a> {
        let mut p = Pipeline::new(self.llm.as_ref(), self.vlm_ec.as_ref(), self.vlm_cap.as_ref()).with_store(store);
        p.template = cfg.template.clone();
        p.scoring = ScoringContext {
            template: cfg.question_template.clone(),
            mode: cfg.mode,
        };
        p.expansion = ExpansionPolicy {
            max_attempts: cfg.max_attempts,
            params: GenerateParams {
                seed: cfg.seed,
                ..GenerateParams::default()
            },
        };
        p.workers = cfg.workers;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vlm_table_by_path_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), "A").unwrap();
        let table = dir.path().join("t.jsonl");
        let id = ImageInput::from_bytes(b"A".to_vec()).id().to_string();
        std::fs::write(
            &table,
            format!(
                "{}\n{}\n",
                r#"{"image": "a.png", "question": "q1", "p_yes": 0.9}"#,
                serde_json::json!({"image_id": id, "question_hash": question_hash("q2"), "p_yes": 0.2})
            ),
        )
        .unwrap();
        let vlm = mock_vlm("m".into(), Some(&table), None, dir.path()).unwrap();
        let img = ImageInput::from_bytes(b"A".to_vec());
        let mode = capex::gateway::LikelihoodMode::Logprob;
        assert_eq!(vlm.query_likelihood(&img, "q1", mode).unwrap().p_yes, 0.9);
        assert_eq!(vlm.query_likelihood(&img, "q2", mode).unwrap().p_yes, 0.2);
        assert_eq!(vlm.query_likelihood(&img, "q3", mode).unwrap().p_yes, 0.5);
    }

    #[test]
    fn out_of_range_mock_score_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("t.jsonl");
        std::fs::write(&table, r#"{"image_id": "x", "question": "q", "p_yes": 1.5}"#).unwrap();
        assert!(mock_vlm("m".into(), Some(&table), None, dir.path()).is_err());
    }

    #[test]
    fn ambiguous_mock_line_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("t.jsonl");
        std::fs::write(&table, r#"{"image_id": "x", "image": "y", "question": "q", "p_yes": 0.5}"#).unwrap();
        assert_eq!(mock_vlm("m".into(), Some(&table), None, dir.path()).unwrap_err().exit_code, 2);
    }
}
