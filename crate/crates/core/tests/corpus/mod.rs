//! The annotated parser corpus: each line says whether a model output
//! parses and to what.

use capex::expansion::{parse_expansion, ParseError, ParsedExpansion};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Case {
    pub name: String,
    pub input: String,
    pub expect: String,
    #[serde(default)]
    pub entailed: Vec<String>,
    #[serde(default)]
    pub opposite: Vec<String>,
    pub error: Option<String>,
    pub key: Option<String>,
}

pub fn corpus() -> Vec<Case> {
    include_str!("../fixtures/parser_corpus.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn error_matches(case: &Case, err: &ParseError) -> bool {
    let key = case.key.clone().unwrap_or_default();
    match case.error.as_deref() {
        Some("no_json_found") => *err == ParseError::NoJsonFound,
        Some("missing_key") => *err == ParseError::MissingKey(key),
        Some("not_a_string_list") => *err == ParseError::NotAStringList(key),
        _ => false,
    }
}

/// Cases whose outcome differs from their annotation.
pub fn mismatches() -> Vec<String> {
    let mut out = Vec::new();
    for case in corpus() {
        let got = parse_expansion(&case.input);
        let ok = match (case.expect.as_str(), &got) {
            ("ok", Ok(p)) => p.entailments == case.entailed && p.contradictions == case.opposite,
            ("error", Err(e)) => error_matches(&case, e),
            _ => false,
        };
        if !ok {
            out.push(format!("{}: got {got:?}", case.name));
        }
    }
    out
}

/// Valid cases that do not survive serialize-then-parse unchanged.
pub fn round_trip_failures() -> Vec<String> {
    corpus()
        .iter()
        .filter(|c| c.expect == "ok")
        .filter_map(|c| {
            let p = parse_expansion(&c.input).ok()?;
            let again: Result<ParsedExpansion, _> = parse_expansion(&p.to_llm_json());
            (again.as_ref() != Ok(&p)).then(|| format!("{}: {again:?}", c.name))
        })
        .collect()
}
