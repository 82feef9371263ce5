//! Fixture builders shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use groundconv::prompts::load_seeds;
use serde_json::{json, Value};

pub fn seeds_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/seeds.jsonl"))
}

pub fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Runs the CLI in-process and returns its exit code.
pub fn run(args: &[&str]) -> i32 {
    groundconv_cli::run_args(std::iter::once("groundconv").chain(args.iter().copied()))
}

pub fn write_lines(path: &Path, lines: &[Value]) {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, body).unwrap();
}

pub fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// `n` three-sentence passages.
pub fn write_passages(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("passages.jsonl");
    let lines: Vec<Value> = (0..n)
        .map(|i| {
            json!({
                "id": format!("p{i:03}"),
                "title": format!("Topic {i}"),
                "text": format!(
                    "Topic {i} was first described in {}. It is studied by many researchers. Its name comes from an old word.",
                    1800 + i
                ),
            })
        })
        .collect();
    write_lines(&path, &lines);
    path
}

fn keyed(rules: Vec<(&str, Vec<&str>)>) -> Value {
    let rules: Vec<Value> = rules
        .into_iter()
        .map(|(state, responses)| json!({"matcher": {"state": state}, "responses": responses}))
        .collect();
    json!({"kind": "scripted", "script": {"keyed": {"rules": rules, "pick": "hash"}}})
}

/// Backends answering by prompt hash, so output depends only on the input.
pub fn scripted_backends() -> Value {
    json!({
        "generator": keyed(vec![
            ("uu", vec!["When was it described?", "Who studies it?", "Where does the name come from?", "Is it popular in Japan?"]),
            ("ac", vec!["answerable", "answerable", "unanswerable"]),
            ("ss", vec!["0", "1", "0, 2", "none"]),
            ("au", vec!["It was first described long ago.", "Many researchers study it.", "Its name comes from an old word."]),
        ]),
        "assistant": keyed(vec![
            ("ac", vec!["Answerable", "Unanswerable"]),
            ("ss", vec!["2", "0, 1"]),
        ]),
        "reference": keyed(vec![
            ("au", vec!["CANNOTANSWER", "It is studied by many researchers.", "It was first described long ago."]),
        ]),
    })
}

pub fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({ "backends": scripted_backends() });
    if let (Value::Object(base), Value::Object(more)) = (&mut cfg, extra) {
        base.extend(more);
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// An agent that answers every seed query with the seed's own agent turn.
pub fn echo_gold_backend() -> Value {
    let seeds = load_seeds(&seeds_path()).unwrap();
    let rules: Vec<Value> = seeds
        .iter()
        .flat_map(|s| s.turns.iter())
        .map(|t| json!({"matcher": {"suffix": format!("User: {}\nAgent:", t.user)}, "responses": [t.agent]}))
        .collect();
    json!({"kind": "scripted", "script": {"keyed": {"rules": rules, "pick": "cycle"}}})
}
