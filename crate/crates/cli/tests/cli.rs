mod common;

use common::*;
use serde_json::Value;

fn retrieval(report: &Value) -> [f64; 3] {
    let r = &report["retrieval"];
    ["text_score", "image_score", "group_score"].map(|k| r[k].as_f64().unwrap())
}

fn sweep_rows(csv: &str) -> Vec<(f64, f64, String, f64)> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha1,alpha2,metric_name,value"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].to_string(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn diagonal_fixture_scores_perfectly() {
    let f = diagonal();
    let out = f.capex(&["evaluate", "--dataset", PAIRS]);
    ok(&out);
    let report = f.json("capex-out/report.json");
    assert_eq!(retrieval(&report), [100.0, 100.0, 100.0]);
    assert_eq!(report["n"], 3);
    assert_eq!(report["degraded"]["full"], 12);
    assert!(stdout(&out).contains("group"));
    // one line per example, in input order
    let ids: Vec<String> = f
        .read("capex-out/scores.jsonl")
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["example_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["ex0", "ex1", "ex2"]);
}

#[test]
fn per_tag_breakdown_partitions_examples() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS]));
    let report = f.json("capex-out/report.json");
    let tags = report["retrieval"]["per_tag"].as_object().unwrap();
    let n: u64 = tags.values().map(|t| t["n"].as_u64().unwrap()).sum();
    assert_eq!(n, 3);
    assert_eq!(tags["Object"]["n"], 2);
}

#[test]
fn manifest_counts_gateway_calls() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS]));
    let m = f.json("capex-out/manifest.json");
    // 6 distinct captions; 4 cells of 3 questions per example
    assert_eq!(m["gateway_calls"]["llm"], 6);
    assert_eq!(m["gateway_calls"]["vlm"], 36);
    assert_eq!(m["examples"], 3);
}

#[test]
fn resumed_run_is_byte_identical_and_offline() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--out", "a"]));
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--out", "b", "--resume"]));
    assert_eq!(f.read("a/scores.jsonl"), f.read("b/scores.jsonl"));
    assert_eq!(f.read("a/triples.jsonl"), f.read("b/triples.jsonl"));
    let m = f.json("b/manifest.json");
    assert_eq!(m["gateway_calls"]["llm"], 0);
    assert_eq!(m["gateway_calls"]["vlm"], 0);
    assert_eq!(m["cache"]["misses"], 0);
}

/// Captions alone mislead on the second example; expansions fix it.
fn misleading_captions(expansions: bool) -> Fixture {
    let mut f = Fixture::new();
    f.pairs(&[("apple", "pear"), ("dog", "cat")], |pictured, named| {
        let fooled = matches!(pictured, "dog" | "cat");
        let mut c = if pictured == named { Cell::MATCH } else { Cell::MISMATCH };
        if fooled {
            c.caption = if pictured == named { 0.2 } else { 0.7 };
        }
        c
    });
    f.finish();
    if !expansions {
        std::fs::write(f.path("llm.jsonl"), "").unwrap();
    }
    f
}

#[test]
fn alpha2_zero_matches_caption_only_baseline() {
    let f = misleading_captions(true);
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--alpha2", "0", "--out", "zero"]));
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--out", "full", "--resume"]));
    let base = misleading_captions(false);
    ok(&base.capex(&["evaluate", "--dataset", PAIRS, "--out", "base"]));

    let zero = f.json("zero/report.json");
    let baseline = base.json("base/report.json");
    assert_eq!(baseline["degraded"]["caption_only"], 8);
    assert_eq!(zero["retrieval"], baseline["retrieval"]);
    assert_eq!(retrieval(&zero), [50.0, 50.0, 50.0]);
    assert_eq!(retrieval(&f.json("full/report.json")), [100.0, 100.0, 100.0]);
}

#[test]
fn rated_scores_track_ratings() {
    let mut f = Fixture::new();
    f.rated(&[1.0, 3.0, 2.0, 5.0, 4.0, 2.0]);
    f.finish();
    let out = f.capex(&["evaluate", "--dataset", RATED, "--benchmark", "rated"]);
    ok(&out);
    let report = f.json("capex-out/report.json");
    let text = report.to_string();
    let pearson = report["rated"]["pearson"].as_f64().unwrap_or_else(|| panic!("{text}"));
    assert!((pearson - 1.0).abs() < 1e-12, "{pearson}");
    assert!((report["rated"]["kendall_tau"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ablate_grid_has_one_row_per_point() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS]));
    let out = f.capex(&["ablate", "--dataset", PAIRS, "--steps", "3"]);
    ok(&out);
    let rows = sweep_rows(&f.read("capex-out/sweep.csv"));
    assert_eq!(rows.len(), 9);
    let points: std::collections::BTreeSet<(u64, u64)> =
        rows.iter().map(|r| (r.0.to_bits(), r.1.to_bits())).collect();
    assert_eq!(points.len(), 9);
    assert!(rows.iter().all(|r| r.2 == "group_score" && r.3 == 100.0));
    let ablation = f.read("capex-out/ablation.csv");
    assert!(ablation.starts_with("variant,metric_name,value"));
    for variant in ["E_only", "E_plus_C", "E_C_caption"] {
        assert!(ablation.contains(variant), "{ablation}");
    }
}

#[test]
fn ablate_config_point_equals_evaluate() {
    let f = misleading_captions(true);
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--alpha1", "0.3", "--alpha2", "0.2"]));
    let want = retrieval(&f.json("capex-out/report.json"));
    let out = f.capex(&[
        "ablate", "--dataset", PAIRS, "--alpha1-grid", "0.3", "--alpha2-grid", "0.2",
        "--metric", "text_score", "--metric", "image_score", "--metric", "group_score",
    ]);
    ok(&out);
    let rows = sweep_rows(&f.read("capex-out/sweep.csv"));
    let got: Vec<f64> = ["text_score", "image_score", "group_score"]
        .iter()
        .map(|m| rows.iter().find(|r| r.2 == *m).unwrap().3)
        .collect();
    assert_eq!(got, want);
}

#[test]
fn ablate_on_cold_store_lists_missing_keys() {
    let f = diagonal();
    let out = f.capex(&["ablate", "--dataset", PAIRS, "--steps", "2"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["kind"], "CacheIncomplete");
    assert!(!err["details"]["missing_keys"].as_array().unwrap().is_empty());
}

#[test]
fn ablate_rejects_unknown_metric() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS]));
    let out = f.capex(&["ablate", "--dataset", PAIRS, "--metric", "accuracy_at_k"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn expand_is_idempotent() {
    let f = diagonal();
    let first = f.capex(&["expand", "--dataset", PAIRS, "--out", "e1.jsonl"]);
    ok(&first);
    let second = f.capex(&["expand", "--dataset", PAIRS, "--out", "e2.jsonl"]);
    ok(&second);
    assert_eq!(f.read("e1.jsonl"), f.read("e2.jsonl"));
    assert_eq!(f.read("e1.jsonl").lines().count(), 6);
    assert!(stderr(&first).contains("6 model call(s)"), "{}", stderr(&first));
    assert!(stderr(&second).contains("0 model call(s)"), "{}", stderr(&second));
}

#[test]
fn expand_to_stdout() {
    let f = diagonal();
    let out = f.capex(&["expand", "--dataset", PAIRS]);
    ok(&out);
    let first: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(first["status"], "expanded");
    assert_eq!(first["premise"], caption("apple"));
    assert_eq!(first["entailments"][0], entailment("apple"));
}

fn expansion_line(premise: &str, entailments: &[&str], contradictions: &[&str]) -> Value {
    serde_json::json!({
        "premise": premise,
        "entailments": entailments,
        "contradictions": contradictions,
        "llm_model": "m",
        "prompt_hash": "h",
    })
}

fn diversity(lines: &[Value]) -> Value {
    let f = Fixture::new();
    write_jsonl(&f.path("exp.jsonl"), lines);
    ok(&f.capex_raw(&["diversity", "--expansions", "exp.jsonl", "--out", "div.json"]));
    f.json("div.json")
}

#[test]
fn diversity_identity_and_disjoint() {
    let same = diversity(&[expansion_line("a red apple", &["a red apple"], &["red apple a"])]);
    assert_eq!(same["mean_jaccard_vs_premise"], 1.0);
    let apart = diversity(&[expansion_line("a red apple", &["two blue cars"], &["the dog"])]);
    assert_eq!(apart["mean_jaccard_vs_premise"], 0.0);
}

#[test]
fn diversity_mixed_fixture() {
    // premise {a, red, apple}; expansions pool {the, apple, is, red, green}
    // shared {red, apple} over union {a, red, apple, the, is, green} = 2/6
    // second: {dog, runs} vs {dog, sleeps} = 1/3
    let r = diversity(&[
        expansion_line("a red apple", &["the apple is red"], &["the apple is green"]),
        expansion_line("dog runs", &["Dog sleeps."], &[]),
    ]);
    let per: Vec<f64> = r["per_sample"].as_array().unwrap().iter().map(|s| s["jaccard"].as_f64().unwrap()).collect();
    assert!((per[0] - 2.0 / 6.0).abs() < 1e-12, "{per:?}");
    assert!((per[1] - 1.0 / 3.0).abs() < 1e-12, "{per:?}");
    assert!((r["mean_jaccard_vs_premise"].as_f64().unwrap() - 0.5 * (2.0 / 6.0 + 1.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn report_renders_saved_results() {
    let f = diagonal();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS]));
    let csv = f.capex_raw(&["report", "capex-out", "--format", "csv"]);
    ok(&csv);
    assert_eq!(stdout(&csv), f.read("capex-out/report.csv"));
    let json = f.capex_raw(&["report", "capex-out/report.json", "--format", "json"]);
    let echoed: Value = serde_json::from_str(&stdout(ok(&json))).unwrap();
    assert_eq!(echoed, f.json("capex-out/report.json"));
}

#[test]
fn ensemble_routes_caption_to_second_model() {
    let mut f = Fixture::new();
    f.pairs(&[("apple", "pear")], |pictured, named| if pictured == named { Cell::MATCH } else { Cell::MISMATCH });
    f.config_extra("[ensemble]\nvlm_ec = \"judge-a\"\nvlm_cap = \"judge-b\"");
    f.finish();
    ok(&f.capex(&["evaluate", "--dataset", PAIRS, "--ensemble"]));
    let p = &f.json("capex-out/report.json")["provenance"];
    assert_eq!(p["vlm_ec"], "mock:judge-a");
    assert_eq!(p["vlm_cap"], "mock:judge-b");
    assert_eq!(p["ensemble"], true);
}

#[test]
fn ensemble_flag_without_section_is_rejected() {
    let f = diagonal();
    let out = f.capex(&["evaluate", "--dataset", PAIRS, "--ensemble"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_failures_exit_two() {
    let f = diagonal();
    // out-of-range alpha
    assert_eq!(f.capex(&["evaluate", "--dataset", PAIRS, "--alpha1", "1.5"]).status.code(), Some(2));
    // unknown flag
    assert_eq!(f.capex(&["evaluate", "--dataset", PAIRS, "--bogus"]).status.code(), Some(2));
    // missing config file
    let out = f.capex_raw(&["--config", "nope.toml", "evaluate", "--dataset", PAIRS]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("nope.toml"));
    // zero workers
    assert_eq!(f.capex(&["--workers", "0", "evaluate", "--dataset", PAIRS]).status.code(), Some(2));
}

#[test]
fn malformed_dataset_exits_two() {
    let f = diagonal();
    std::fs::write(
        f.path("bad.jsonl"),
        r#"{"id":"x","caption_0":"a","caption_1":"b","caption_2":"c","image_0":"apple.png","image_1":"pear.png"}"#,
    )
    .unwrap();
    let out = f.capex(&["evaluate", "--dataset", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "SchemaViolation");

    std::fs::write(
        f.path("noimg.jsonl"),
        r#"{"id":"x","caption_0":"a","caption_1":"b","image_0":"missing.png","image_1":"pear.png"}"#,
    )
    .unwrap();
    assert_eq!(f.capex(&["evaluate", "--dataset", "noimg.jsonl"]).status.code(), Some(2));
}

#[test]
fn missing_prompt_template_exits_two() {
    let mut f = diagonal();
    f.config_extra("prompt_template = \"templates/missing.txt\"");
    f.finish();
    let out = f.capex(&["expand", "--dataset", PAIRS]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "MissingFile");
}

#[test]
fn custom_prompt_template_changes_cache_identity() {
    let mut f = diagonal();
    ok(&f.capex(&["expand", "--dataset", PAIRS, "--out", "a.jsonl"]));
    std::fs::write(f.path("p.txt"), "Expand this: {Caption}\n").unwrap();
    f.config_extra("prompt_template = \"p.txt\"");
    f.finish();
    let out = f.capex(&["expand", "--dataset", PAIRS, "--out", "b.jsonl"]);
    ok(&out);
    // a new prompt hash means none of the cached expansions apply
    assert!(stderr(&out).contains("6 model call(s)"), "{}", stderr(&out));
    let a: Value = serde_json::from_str(f.read("a.jsonl").lines().next().unwrap()).unwrap();
    let b: Value = serde_json::from_str(f.read("b.jsonl").lines().next().unwrap()).unwrap();
    assert_ne!(a["prompt_hash"], b["prompt_hash"]);
}
