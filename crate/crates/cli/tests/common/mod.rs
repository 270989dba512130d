//! On-disk fixtures for driving the `capex` binary with mock backends.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capex::scoring::{format_question, Polarity};
use serde_json::{json, Value};
use tempfile::TempDir;

pub const CONFIG: &str = "capex.toml";
pub const PAIRS: &str = "pairs.jsonl";
pub const RATED: &str = "rated.jsonl";

pub fn caption(noun: &str) -> String {
    format!("a photo of a {noun}")
}

pub fn entailment(noun: &str) -> String {
    format!("there is a {noun}")
}

pub fn contradiction(noun: &str) -> String {
    format!("the {noun} is invisible")
}

fn completion(noun: &str) -> String {
    json!({
        "Entailed descriptions": [entailment(noun)],
        "Opposite descriptions": [contradiction(noun)],
    })
    .to_string()
}

/// Mock scores for one image against the three questions about `noun`.
#[derive(Clone, Copy)]
pub struct Cell {
    pub caption: f64,
    pub entailment: f64,
    /// p_yes of the contradiction question; its score is `1 - this`.
    pub contradiction: f64,
}

impl Cell {
    pub const MATCH: Cell = Cell { caption: 0.9, entailment: 0.9, contradiction: 0.1 };
    pub const MISMATCH: Cell = Cell { caption: 0.1, entailment: 0.2, contradiction: 0.8 };

    pub fn uniform(p: f64) -> Cell {
        Cell { caption: p, entailment: p, contradiction: 1.0 - p }
    }
}

pub struct Fixture {
    pub dir: TempDir,
    llm: Vec<Value>,
    vlm: Vec<Value>,
    extra_config: String,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("img")).unwrap();
        Fixture { dir, llm: Vec::new(), vlm: Vec::new(), extra_config: String::new() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn image(&self, name: &str) -> String {
        let rel = format!("{name}.png");
        std::fs::write(self.dir.path().join("img").join(&rel), format!("pixels of {name}")).unwrap();
        rel
    }

    /// Scripted expansion for the caption about `noun`.
    pub fn expands(&mut self, noun: &str) {
        self.llm.push(json!({"caption": caption(noun), "completion": completion(noun)}));
    }

    pub fn score(&mut self, image: &str, noun: &str, cell: Cell) {
        for (text, polarity, p) in [
            (caption(noun), Polarity::ExpectYes, cell.caption),
            (entailment(noun), Polarity::ExpectYes, cell.entailment),
            (contradiction(noun), Polarity::ExpectNo, cell.contradiction),
        ] {
            let q = format_question(&text, polarity).unwrap().question;
            self.vlm.push(json!({"image": image, "question": q, "p_yes": p}));
        }
    }

    pub fn config_extra(&mut self, toml: &str) {
        self.extra_config.push_str(toml);
        self.extra_config.push('\n');
    }

    /// Pair dataset where example `i` shows `nouns[i].0` and `nouns[i].1`;
    /// `cell(pictured, named)` gives the mock scores.
    pub fn pairs(&mut self, nouns: &[(&str, &str)], cell: impl Fn(&str, &str) -> Cell) {
        let mut lines = Vec::new();
        for (i, (a, b)) in nouns.iter().enumerate() {
            let (ia, ib) = (self.image(a), self.image(b));
            lines.push(json!({
                "id": format!("ex{i}"),
                "caption_0": caption(a),
                "caption_1": caption(b),
                "image_0": ia,
                "image_1": ib,
                "tags": [if i % 2 == 0 { "Object" } else { "Relation" }],
            }));
            for (img, pictured) in [(&ia, a), (&ib, b)] {
                for named in [a, b] {
                    self.score(img, named, cell(pictured, named));
                }
            }
            self.expands(a);
            self.expands(b);
        }
        write_jsonl(&self.path(PAIRS), &lines);
    }

    /// Rated dataset whose mock scores rise linearly with the rating.
    pub fn rated(&mut self, ratings: &[f64]) {
        let mut lines = Vec::new();
        for (i, r) in ratings.iter().enumerate() {
            let noun = format!("thing{i}");
            let img = self.image(&noun);
            lines.push(json!({
                "id": format!("r{i}"),
                "prompt": caption(&noun),
                "image": img,
                "human_rating": r,
                "rating_scale": "likert_1_5",
            }));
            self.score(&img, &noun, Cell::uniform(0.1 + 0.2 * (r - 1.0)));
            self.expands(&noun);
        }
        write_jsonl(&self.path(RATED), &lines);
    }

    /// Writes the mock tables and config. Call after adding data.
    pub fn finish(&self) {
        write_jsonl(&self.path("llm.jsonl"), &self.llm);
        write_jsonl(&self.path("vlm.jsonl"), &self.vlm);
        std::fs::write(
            self.path(CONFIG),
            format!(
                "store_dir = \"store\"\nimage_root = \"img\"\n{}\n[mock]\nllm_responses = \"llm.jsonl\"\nvlm_table = \"vlm.jsonl\"\n",
                self.extra_config
            ),
        )
        .unwrap();
    }

    /// Runs `capex --config capex.toml --mock <args>` inside the fixture.
    pub fn capex(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", CONFIG, "--mock"];
        full.extend_from_slice(args);
        self.capex_raw(&full)
    }

    pub fn capex_raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_capex"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("RUST_LOG")
            .env_remove("CAPEX_AUTH_TOKEN")
            .output()
            .unwrap()
    }

    pub fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }

    pub fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&self.read(rel)).unwrap()
    }
}

pub fn write_jsonl(path: &Path, lines: &[Value]) {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, body).unwrap();
}

/// Diagonal fixture: every image scores its own caption above the other.
pub fn diagonal() -> Fixture {
    let mut f = Fixture::new();
    f.pairs(&[("apple", "pear"), ("dog", "cat"), ("car", "bus")], |pictured, named| {
        if pictured == named { Cell::MATCH } else { Cell::MISMATCH }
    });
    f.finish();
    f
}

pub fn ok(out: &Output) -> &Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The JSON error object printed on stderr by a failing run.
pub fn error_json(out: &Output) -> Value {
    let err = stderr(out);
    let line = err.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no error json in {err}"));
    let v: Value = serde_json::from_str(line).unwrap();
    v["error"].clone()
}
