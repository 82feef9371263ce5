//! End-to-end subcommand behaviour with scripted backends.

mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use serde_json::{json, Value};

fn generate(dir: &Path, n: usize, algo: &str, out: &str, extra: &[&str]) -> i32 {
    let cfg = write_config(dir, json!({}));
    let passages = write_passages(dir, n);
    let (cfg, passages, seeds, out) = (s(&cfg), s(&passages), s(&seeds_path()), s(&dir.join(out)));
    let mut args = vec![
        "generate", "--config", &cfg, "--algo", algo, "--passages", &passages, "--seeds", &seeds, "--out", &out,
        "--seed", "7",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn generate_writes_one_conversation_per_passage() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(generate(dir.path(), 3, "uu-ac-ss-au-assisted", "conv.jsonl", &[]), 0);
    let convs = read_lines(&dir.path().join("conv.jsonl"));
    assert_eq!(convs.len(), 3);
    assert_eq!(read_lines(&dir.path().join("conv.docs.jsonl")).len(), 3);
    for c in &convs {
        assert_eq!(c["utterances"].as_array().unwrap().len(), 10);
        for t in c["traces"].as_array().unwrap() {
            assert!(t["raw_exchanges"].as_array().unwrap().is_empty());
        }
    }
}

#[test]
fn keep_exchanges_retains_prompts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(generate(dir.path(), 1, "uu-au", "conv.jsonl", &["--keep-exchanges"]), 0);
    let c = &read_lines(&dir.path().join("conv.jsonl"))[0];
    assert_eq!(c["traces"][0]["raw_exchanges"].as_array().unwrap().len(), 2);
}

#[test]
fn generate_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(generate(dir.path(), 6, "uu-ac-au", "a.jsonl", &["--parallelism", "3"]), 0);
    assert_eq!(generate(dir.path(), 6, "uu-ac-au", "b.jsonl", &[]), 0);
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn unknown_algorithm_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(generate(dir.path(), 1, "uu-xx-au", "conv.jsonl", &[]), 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_groundconv");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["mix", "--total", "3"]), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = dir.path().join("out.jsonl");
    assert_eq!(
        code(&["mix", "--input", &format!("{}=1", s(&missing)), "--total", "1", "--out", &s(&out)]),
        Some(1)
    );
}

#[test]
fn unset_environment_variable_in_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let body = json!({"backends": {"generator": {
        "kind": "http", "endpoint_url": "http://127.0.0.1:9/v1/completions",
        "model": "${GROUNDCONV_TEST_UNSET_MODEL_VAR}"
    }}});
    std::fs::write(&cfg, body.to_string()).unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "").unwrap();
    assert_eq!(run(&["stats", "--config", &s(&cfg), "--data", &s(&data), "--docs", &s(&data)]), 2);
}

/// Two conversations, four turns; scores worked out by hand below.
fn mini_dataset(dir: &Path) -> (String, String, String) {
    let docs = dir.join("docs.jsonl");
    write_lines(
        &docs,
        &[
            json!({"id": "d1", "title": "Cats", "text": "The cat sat on the mat. It was red."}),
            json!({"id": "d2", "title": "Dogs", "text": "Dogs are loyal animals. They bark."}),
        ],
    );
    let data = dir.join("data.jsonl");
    let conv = |id: &str, turns: [(&str, &str); 2]| {
        let mut u = Vec::new();
        for (i, (q, a)) in turns.iter().enumerate() {
            u.push(json!({"speaker": "User", "text": q, "turn_index": i}));
            u.push(json!({"speaker": "Agent", "text": a, "turn_index": i}));
        }
        json!({"document_id": id, "utterances": u})
    };
    write_lines(
        &data,
        &[
            conv("d1", [("Where did the cat sit?", "The cat sat on the red mat."), ("Whose cat is it?", "CANNOTANSWER")]),
            conv("d2", [("How old are dogs?", "Dogs bark loudly."), ("Are dogs loyal?", "CANNOTANSWER")]),
        ],
    );
    let refs = dir.join("refs.jsonl");
    let r = |id: &str, t: usize, text: &str| {
        json!({"conversation_id": id, "turn_index": t, "reference_text": text, "reference_is_no_answer": text == "CANNOTANSWER"})
    };
    write_lines(
        &refs,
        &[
            r("d1", 0, "A cat sat on a mat."),
            r("d1", 1, "CANNOTANSWER"),
            r("d2", 0, "CANNOTANSWER"),
            r("d2", 1, "Dogs are loyal."),
        ],
    );
    (s(&data), s(&docs), s(&refs))
}

fn close(v: &Value, expected: f64) {
    assert!((v.as_f64().unwrap() - expected).abs() < 1e-9, "{v} vs {expected}");
}

#[test]
fn evaluate_matches_hand_scored_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, docs, refs) = mini_dataset(dir.path());
    let out = dir.path().join("report.json");
    let csv = dir.path().join("turns.csv");
    let args = ["evaluate", "--data", &data, "--docs", &docs, "--refs", &refs, "--out", &s(&out), "--csv", &s(&csv)];
    assert_eq!(run(&args), 0);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let sc = &rep["scores"];
    // d1/0: {cat, sat, red, mat} vs {cat, sat, mat} gives F1 6/7; d2/1 answers nothing, F1 0.
    close(&sc["f1_answerable"], 3.0 / 7.0);
    close(&sc["f1_unanswerable"], 0.5);
    close(&sc["f1_hm"], 6.0 / 13.0);
    close(&sc["cls_acc_a"], 0.5);
    close(&sc["cls_acc_ua"], 0.5);
    close(&sc["cls_acc_hm"], 0.5);
    let st = &rep["stats"];
    close(&st["pct_has_answer"], 50.0);
    close(&st["pct_extracted"], 0.0);
    // {dog, bark, loudli} against {dog, loyal, anim, bark}: 2/3; the cat answer is fully grounded.
    close(&st["mean_faithfulness"], 5.0 / 6.0);
    assert!(dir.path().join("report.txt").exists());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval_report.json");
    let actual = std::fs::read_to_string(&out).unwrap();
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &actual).unwrap();
    }
    assert_eq!(actual, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn evaluate_requires_references() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, _) = mini_dataset(dir.path());
    assert_eq!(run(&["evaluate", "--data", &data]), 2);
    let missing = s(&dir.path().join("none.jsonl"));
    assert_eq!(run(&["evaluate", "--data", &data, "--refs", &missing]), 1);
    // A reference file lacking a turn is fatal unless explicitly allowed.
    let partial = dir.path().join("partial.jsonl");
    write_lines(&partial, &[json!({"conversation_id": "d1", "turn_index": 0, "reference_text": "x", "reference_is_no_answer": false})]);
    assert_eq!(run(&["evaluate", "--data", &data, "--refs", &s(&partial)]), 1);
    assert_eq!(run(&["evaluate", "--data", &data, "--refs", &s(&partial), "--allow-missing"]), 0);
}

#[test]
fn make_refs_writes_one_reference_per_turn() {
    let dir = tempfile::tempdir().unwrap();
    let (data, docs, _) = mini_dataset(dir.path());
    let cfg = write_config(dir.path(), json!({}));
    let out = dir.path().join("made.jsonl");
    let seeds = s(&seeds_path());
    let args = ["make-refs", "--config", &s(&cfg), "--data", &data, "--docs", &docs, "--seeds", &seeds, "--out", &s(&out)];
    assert_eq!(run(&args), 0);
    let refs = read_lines(&out);
    assert_eq!(refs.len(), 4);
    for r in &refs {
        assert_eq!(r["reference_is_no_answer"], json!(r["reference_text"] == "CANNOTANSWER"));
    }
    let report = dir.path().join("r.json");
    let args = [
        "evaluate", "--config", &s(&cfg), "--data", &data, "--docs", &docs, "--seeds", &seeds, "--make-refs", "--out",
        &s(&report),
    ];
    assert_eq!(run(&args), 0);
}

#[test]
fn mix_splits_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_lines(&a, &(0..10).map(|i| json!({"src": "a", "i": i})).collect::<Vec<_>>());
    write_lines(&b, &(0..10).map(|i| json!({"src": "b", "i": i})).collect::<Vec<_>>());
    let mix = |out: &str| {
        let out = dir.path().join(out);
        let args = ["mix", "--input", &format!("{}=50", s(&a)), "--input", &format!("{}=50", s(&b)), "--total", "10", "--seed", "3", "--out", &s(&out)];
        assert_eq!(run(&args), 0);
        std::fs::read_to_string(out).unwrap()
    };
    let first = mix("m1.jsonl");
    assert_eq!(first, mix("m2.jsonl"));
    let lines: Vec<Value> = first.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["src"] == "a").count(), 5);
    assert_eq!(lines.iter().filter(|l| l["src"] == "b").count(), 5);
}

#[test]
fn stats_on_all_no_answer_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (_, docs, _) = mini_dataset(dir.path());
    let data = dir.path().join("na.jsonl");
    let u = json!([
        {"speaker": "User", "text": "Why?", "turn_index": 0},
        {"speaker": "Agent", "text": "CANNOTANSWER", "turn_index": 0}
    ]);
    write_lines(&data, &[json!({"document_id": "d1", "utterances": u}), json!({"document_id": "d2", "utterances": u})]);
    let out = dir.path().join("stats.json");
    assert_eq!(run(&["stats", "--data", &s(&data), "--docs", &docs, "--out", &s(&out)]), 0);
    let st: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(st["pct_has_answer"], json!(0.0));
    assert_eq!(st["mean_faithfulness"], Value::Null);
}

#[test]
fn roundtrip_with_echo_agent_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({"roles": {"agent": "echo"}}));
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["backends"]["echo"] = echo_gold_backend();
    std::fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(generate_with(dir.path(), &cfg), 0);
    let out = dir.path().join("rt.json");
    let args = [
        "roundtrip", "--config", &s(&cfg), "--demos", &s(&dir.path().join("conv.jsonl")), "--docs",
        &s(&dir.path().join("conv.docs.jsonl")), "--seeds", &s(&seeds_path()), "--cycles", "1", "--rounds", "2",
        "--seed", "4", "--out", &s(&out),
    ];
    assert_eq!(run(&args), 0);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(rep["mean_f1_hm"], json!(1.0));
    assert_eq!(rep["std_pct"], json!(0.0));
}

fn generate_with(dir: &Path, cfg: &Path) -> i32 {
    let passages = write_passages(dir, 3);
    let out = dir.join("conv.jsonl");
    run(&[
        "generate", "--config", &s(cfg), "--algo", "uu-au", "--passages", &s(&passages), "--seeds",
        &s(&seeds_path()), "--out", &s(&out), "--seed", "1",
    ])
}

#[test]
fn export_sft_writes_template_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, docs, _) = mini_dataset(dir.path());
    let out = dir.path().join("sft.jsonl");
    assert_eq!(run(&["export-sft", "--data", &data, "--docs", &docs, "--out", &s(&out)]), 0);
    let ex = read_lines(&out);
    assert_eq!(ex.len(), 4);
    let input = ex[1]["input"].as_str().unwrap();
    assert!(input.contains("(b) If not, generate CANNOTANSWER."));
    assert!(input.ends_with("User: Where did the cat sit? Agent: The cat sat on the red mat. User: Whose cat is it?\n\nOutput:"));
    assert_eq!(ex[1]["output"], "CANNOTANSWER");
    // A tiny budget filters everything.
    let out2 = dir.path().join("sft2.jsonl");
    assert_eq!(run(&["export-sft", "--data", &data, "--docs", &docs, "--out", &s(&out2), "--max-input-tokens", "10"]), 0);
    assert_eq!(std::fs::read_to_string(out2).unwrap(), "");
}

#[test]
fn outputs_may_not_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, docs, _) = mini_dataset(dir.path());
    assert_eq!(run(&["export-sft", "--data", &data, "--docs", &docs, "--out", &data]), 2);
}
