//! Run configuration: one TOML file, overridden by command-line flags.
//!
//! Relative paths in the file resolve against the file's own directory;
//! relative paths given as flags resolve against the working directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use capex::aggregation::{BalanceConfig, Routing};
use capex::expansion::PromptTemplate;
use capex::gateway::{EndpointKind, LikelihoodMode, ModelEndpoint};
use capex::scoring::QuestionTemplate;
use serde::Deserialize;

use crate::error::CliError;

/// Global auth token; applies to every endpoint.
pub const AUTH_TOKEN_ENV: &str = "CAPEX_AUTH_TOKEN";

const MOCK_LLM: &str = "mock-llm";
const MOCK_VLM: &str = "mock-vlm";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    llm: Option<String>,
    vlm: Option<String>,
    store_dir: Option<PathBuf>,
    image_root: Option<PathBuf>,
    workers: Option<usize>,
    mode: Option<LikelihoodMode>,
    prompt_template: Option<PathBuf>,
    question_template: Option<String>,
    max_attempts: Option<u32>,
    seed: Option<u64>,
    balance: Option<AlphaSection>,
    ensemble: Option<EnsembleSection>,
    #[serde(default)]
    endpoints: Vec<ModelEndpoint>,
    mock: Option<MockSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaSection {
    alpha1: Option<f64>,
    alpha2: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSection {
    vlm_ec: String,
    vlm_cap: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MockSection {
    llm_responses: Option<PathBuf>,
    default_completion: Option<String>,
    vlm_table: Option<PathBuf>,
    caption_vlm_table: Option<PathBuf>,
    noise_seed: Option<u64>,
}

/// Offline backends, used with `--mock`.
#[derive(Debug, Clone, Default)]
pub struct MockConfig {
    /// JSONL of `{"caption", "completion"}`.
    pub llm_responses: Option<PathBuf>,
    pub default_completion: Option<String>,
    /// JSONL of `{"image" | "image_id", "question" | "question_hash", "p_yes"}`.
    pub vlm_table: Option<PathBuf>,
    /// Table for the caption scorer of an ensemble; defaults to `vlm_table`.
    pub caption_vlm_table: Option<PathBuf>,
    pub noise_seed: Option<u64>,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub image_root: Option<PathBuf>,
    pub workers: Option<usize>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub ensemble: bool,
    pub mock: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub endpoints: Vec<ModelEndpoint>,
    pub llm: String,
    pub balance: BalanceConfig,
    pub ensemble: bool,
    pub store_dir: PathBuf,
    pub image_root: Option<PathBuf>,
    pub workers: usize,
    pub mode: LikelihoodMode,
    pub template: PromptTemplate,
    pub question_template: QuestionTemplate,
    pub max_attempts: u32,
    pub seed: Option<u64>,
    /// Present exactly when running offline.
    pub mock: Option<MockConfig>,
}

fn env_suffix(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

/// Token from `CAPEX_AUTH_TOKEN_<NAME>`, then `CAPEX_AUTH_TOKEN`.
fn token_override(lookup: &dyn Fn(&str) -> Option<String>, endpoint: &str) -> Option<String> {
    lookup(&format!("{AUTH_TOKEN_ENV}_{}", env_suffix(endpoint)))
        .or_else(|| lookup(AUTH_TOKEN_ENV))
        .filter(|t| !t.is_empty())
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn must_exist(what: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::invalid(
            "MissingFile",
            format!("{what} not found: {}", path.display()),
        ))
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        Self::load_with_env(path, ov, &|k| std::env::var(k).ok())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        ov: &Overrides,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let (file, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::invalid("ConfigUnreadable", format!("{}: {e}", p.display()))
                })?;
                let file: FileConfig = toml::from_str(&text)
                    .map_err(|e| CliError::invalid("ConfigInvalid", format!("{}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        Self::build(file, &base, ov, env)
    }

    fn build(
        file: FileConfig,
        base: &Path,
        ov: &Overrides,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let mut endpoints = file.endpoints;
        let mut names = HashSet::new();
        for ep in &mut endpoints {
            ep.validate()?;
            if !names.insert(ep.name.clone()) {
                return Err(CliError::invalid(
                    "ConfigInvalid",
                    format!("endpoint {:?} declared twice", ep.name),
                ));
            }
            if let Some(token) = token_override(env, &ep.name) {
                ep.auth_token = Some(token);
            }
        }

        let pick = |declared: Option<String>, kind: EndpointKind, fallback: &str| -> Result<String, CliError> {
            if let Some(name) = declared {
                return Ok(name);
            }
            let mut of_kind = endpoints.iter().filter(|e| e.kind == kind);
            match (of_kind.next(), of_kind.next()) {
                (Some(only), None) => Ok(only.name.clone()),
                _ if ov.mock => Ok(fallback.to_string()),
                (None, _) => Err(CliError::invalid(
                    "ConfigInvalid",
                    format!("no {kind} endpoint configured"),
                )),
                _ => Err(CliError::invalid(
                    "ConfigInvalid",
                    format!("several {kind} endpoints declared; name one with `{kind} = ...`"),
                )),
            }
        };
        let llm = pick(file.llm, EndpointKind::Llm, MOCK_LLM)?;
        let routing = if ov.ensemble {
            let e = file.ensemble.ok_or_else(|| {
                CliError::invalid("ConfigInvalid", "--ensemble needs an [ensemble] section with vlm_ec and vlm_cap")
            })?;
            Routing {
                vlm_ec: e.vlm_ec,
                vlm_cap: e.vlm_cap,
            }
        } else {
            let vlm = pick(file.vlm, EndpointKind::Vlm, MOCK_VLM)?;
            Routing {
                vlm_ec: vlm.clone(),
                vlm_cap: vlm,
            }
        };
        if !ov.mock {
            let check = |name: &str, kind: EndpointKind| match endpoints.iter().find(|e| e.name == name) {
                Some(e) if e.kind == kind => Ok(()),
                Some(e) => Err(CliError::invalid(
                    "ConfigInvalid",
                    format!("endpoint {name:?} is {}, expected {kind}", e.kind),
                )),
                None => Err(CliError::invalid(
                    "ConfigInvalid",
                    format!("endpoint {name:?} is not declared"),
                )),
            };
            check(&llm, EndpointKind::Llm)?;
            check(&routing.vlm_ec, EndpointKind::Vlm)?;
            check(&routing.vlm_cap, EndpointKind::Vlm)?;
        }

        let mut balance = BalanceConfig {
            routing,
            ..BalanceConfig::default()
        };
        if let Some(b) = file.balance {
            balance.alpha1 = b.alpha1.unwrap_or(balance.alpha1);
            balance.alpha2 = b.alpha2.unwrap_or(balance.alpha2);
        }
        balance.alpha1 = ov.alpha1.unwrap_or(balance.alpha1);
        balance.alpha2 = ov.alpha2.unwrap_or(balance.alpha2);
        balance.validate()?;

        let template = match file.prompt_template {
            Some(p) => {
                let p = resolve(base, p);
                must_exist("prompt template", &p)?;
                PromptTemplate::from_file(&p)?
            }
            None => PromptTemplate::builtin(),
        };
        let question_template = match file.question_template {
            Some(t) => QuestionTemplate::new(t).map_err(|e| CliError::invalid("InvalidTemplate", e.to_string()))?,
            None => QuestionTemplate::default(),
        };

        let workers = ov.workers.or(file.workers).unwrap_or(4);
        if workers == 0 {
            return Err(CliError::invalid("ConfigInvalid", "workers must be at least 1"));
        }
        let max_attempts = file.max_attempts.unwrap_or(3);
        if max_attempts == 0 {
            return Err(CliError::invalid("ConfigInvalid", "max_attempts must be at least 1"));
        }

        let mock = if ov.mock {
            let m = file.mock.unwrap_or_default();
            let files = [
                ("mock llm responses", m.llm_responses.map(|p| resolve(base, p))),
                ("mock vlm table", m.vlm_table.map(|p| resolve(base, p))),
                ("mock caption vlm table", m.caption_vlm_table.map(|p| resolve(base, p))),
            ];
            for (what, p) in &files {
                if let Some(p) = p {
                    must_exist(what, p)?;
                }
            }
            let [(_, llm_responses), (_, vlm_table), (_, caption_vlm_table)] = files;
            Some(MockConfig {
                llm_responses,
                default_completion: m.default_completion,
                vlm_table,
                caption_vlm_table,
                noise_seed: m.noise_seed,
            })
        } else {
            None
        };

        let image_root = ov
            .image_root
            .clone()
            .or_else(|| file.image_root.map(|p| resolve(base, p)));
        if let Some(root) = &image_root {
            must_exist("image root", root)?;
        }

        Ok(Self {
            endpoints,
            llm,
            balance,
            ensemble: ov.ensemble,
            store_dir: resolve(base, file.store_dir.unwrap_or_else(|| "capex-store".into())),
            image_root,
            workers,
            mode: file.mode.unwrap_or_default(),
            template,
            question_template,
            max_attempts,
            seed: file.seed,
            mock,
        })
    }

    pub fn endpoint(&self, name: &str) -> Option<&ModelEndpoint> {
        self.endpoints.iter().find(|e| e.name == name)
    }

    /// Image root for `dataset`: flag or file value, else the dataset's directory.
    pub fn image_root_for(&self, dataset: &Path) -> PathBuf {
        self.image_root
            .clone()
            .unwrap_or_else(|| dataset.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}
