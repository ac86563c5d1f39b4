use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn kvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvpformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kvp(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK: &str = r#"{
  "model": {"num_encoder_layers": 1, "num_decoder_layers": 1, "num_heads": 2, "d_model": 16,
            "d_ffn": 32, "top_k": 3, "hash_vocab_size": 64, "bias_hidden": 8, "dropout_rate": 0.0},
  "train": {"epochs": 4, "batch_size": 4, "lr_new": 5e-3, "lr_backbone": 5e-3}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("quick.json"), QUICK).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, count: &str) -> PathBuf {
        let out = self.path(name);
        ok(&[
            "synth",
            "--out",
            p(&out),
            "--seed",
            "3",
            "--count",
            count,
            "--grid",
            "2x2",
        ]);
        out
    }

    fn train(&self, name: &str) -> PathBuf {
        let ckpt = self.path(name);
        let cfg = self.path("quick.json");
        ok(&[
            "train",
            "--synthetic",
            "2x2:4",
            "--seed",
            "7",
            "--config",
            p(&cfg),
            "--out",
            p(&ckpt),
        ]);
        ckpt
    }
}

#[test]
fn train_without_a_data_source_is_a_usage_error() {
    let f = Fixture::new();
    let out = kvp(&["train", "--out", p(&f.path("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("m.ckpt").exists());
}

#[test]
fn unreadable_inputs_fail_before_writing() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.json"), r#"{"train": {"batch_size": 0}}"#).unwrap();
    let out = kvp(&[
        "train",
        "--synthetic",
        "1x1:2",
        "--config",
        p(&f.path("bad.json")),
        "--out",
        p(&f.path("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    assert!(!f.path("m.ckpt").exists());

    let out = kvp(&["train", "--data", p(&f.path("nowhere")), "--out", p(&f.path("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!f.path("m.ckpt").exists());

    let ckpt = f.train("m.ckpt");
    let out = kvp(&[
        "predict",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&f.path("nowhere")),
        "--out",
        p(&f.path("pred.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!f.path("pred.json").exists());
}

#[test]
fn predictions_round_trip_through_eval() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt");
    let data = f.synth("docs", "5");
    let pred = f.path("pred.json");
    let svg = f.path("svg");
    let printed: Value = serde_json::from_str(&ok(&[
        "predict",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&pred),
        "--render",
        p(&svg),
    ]))
    .unwrap();
    let scored: Value = serde_json::from_str(&ok(&["eval", "--pred", p(&pred), "--gold", p(&data)])).unwrap();
    for field in ["precision", "recall", "f1", "tp", "n_pred", "n_gold"] {
        assert_eq!(printed[field], scored[field], "{field}");
    }
    assert_eq!(std::fs::read_dir(&svg).unwrap().count(), 5);
}

#[test]
fn eval_of_gold_is_perfect_and_of_nothing_is_zero() {
    let f = Fixture::new();
    let data = f.synth("docs", "3");
    let gold = f.path("gold.json");
    let mut map = serde_json::Map::new();
    for doc in kvpformer::data::load_funsd(&data).unwrap() {
        let pairs: Vec<[usize; 2]> = doc.gold_pairs.iter().map(|p| [p.key_id, p.value_id]).collect();
        map.insert(doc.id.clone(), serde_json::json!(pairs));
    }
    std::fs::write(&gold, Value::Object(map).to_string()).unwrap();
    let perfect = ok(&["eval", "--pred", p(&gold), "--gold", p(&data)]);
    assert!(perfect.contains(r#""f1": 1.0000"#), "{perfect}");

    std::fs::write(f.path("empty.json"), "").unwrap();
    let zero: Value =
        serde_json::from_str(&ok(&["eval", "--pred", p(&f.path("empty.json")), "--gold", p(&data)])).unwrap();
    assert_eq!(zero["f1"], 0.0);
    assert_eq!(zero["precision"], 0.0);

    std::fs::write(f.path("stray.json"), r#"{"not_a_doc": [[1, 2]]}"#).unwrap();
    let out = kvp(&["eval", "--pred", p(&f.path("stray.json")), "--gold", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("synth_3_0000") && err.contains("not_a_doc"), "{err}");
}

#[test]
fn empty_document_set_predicts_an_empty_object() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt");
    let empty = f.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let pred = f.path("pred.json");
    ok(&["predict", "--ckpt", p(&ckpt), "--data", p(&empty), "--out", p(&pred)]);
    assert_eq!(std::fs::read_to_string(&pred).unwrap().trim(), "{}");
}

#[test]
fn a_one_pair_document_renders_one_arrow() {
    let f = Fixture::new();
    let data = f.path("one");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--count",
        "1",
        "--grid",
        "1x1",
        "--distractors",
        "0",
    ]);
    let out = f.path("svg");
    ok(&["render-only", "--data", p(&data), "--out", p(&out)]);
    let file = std::fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let svg = std::fs::read_to_string(file).unwrap();
    assert_eq!(svg.matches("<line class=\"arrow\"").count(), 1);
    assert!(svg.contains("stroke=\"red\""));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let out = ok(&["gradcheck", "--seed", "1"]);
    assert!(out.contains("group backbone") && out.contains("group head"), "{out}");
    assert!(out.trim_end().ends_with("PASS"), "{out}");

    let out = kvp(&["gradcheck", "--seed", "1", "--fault-op", "layer_norm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn checkpoint_shape_mismatch_names_the_tensor() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt");
    let mut cp = kvpformer::cli::Checkpoint::load(&ckpt).unwrap();
    cp.config.model.d_ffn = 24;
    cp.save(&f.path("bad.ckpt")).unwrap();
    let data = f.synth("docs", "1");
    let out = kvp(&[
        "predict",
        "--ckpt",
        p(&f.path("bad.ckpt")),
        "--data",
        p(&data),
        "--out",
        p(&f.path("pred.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder.0.ffn.0.weight"));
}

#[test]
fn default_config_is_full_scale() {
    let c = kvpformer::cli::RunConfig::default();
    let m = &c.model;
    assert_eq!(
        (
            m.num_encoder_layers,
            m.num_decoder_layers,
            m.num_heads,
            m.d_model,
            m.d_ffn,
            m.top_k
        ),
        (3, 3, 12, 768, 2048, 5)
    );
    assert_eq!((c.train.lr_backbone, c.train.lr_new), (2e-5, 5e-4));
}
