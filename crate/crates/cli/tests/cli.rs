use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use vdu_core::ingest::{Manifest, ManifestEntry};
use vdu_core::schema::{Regime, Split};

fn vdu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdu"))
        .args(args)
        .current_dir(dir)
        .env("VDU_LOG", "warn")
        .output()
        .expect("vdu runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn small_corpus(dir: &Path) {
    write_json(
        &dir.join("spec.json"),
        &json!({"seed": 5, "counts": {"kie": 3, "extractive_qa": 4, "option_qa": 0, "yes_no": 0, "multi_page": 2,
            "classification": 0, "dla": 0, "held_out_kie": 2, "held_out_qa": 2, "held_out_numeric": 0,
            "held_out_nli": 0, "held_out_multi_page": 1}}),
    );
    ok(&vdu(dir, &["generate", "--spec", "spec.json", "--out", "corpus"]));
}

fn tiny_config(dir: &Path, extra: Value) {
    let mut cfg = json!({
        "vocab": {"min_freq": 1},
        "model": {"dim": 8, "lm_dim": 8, "tokens": 4, "heads": 2, "docformer_blocks": 1, "vision_blocks": 1,
                  "lm_encoder_blocks": 1, "lm_decoder_blocks": 1, "lm_heads": 2, "max_decoder_len": 8},
        "train": {"warmup_steps": 2, "max_steps": 6, "batch_size": 2},
        "pretrain": {"warmup_steps": 2, "max_steps": 4, "batch_size": 4},
        "max_len": 6
    });
    if let (Some(base), Some(add)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            base.insert(k.clone(), v.clone());
        }
    }
    write_json(&dir.join("tiny.json"), &cfg);
}

#[test]
fn generate_then_convert_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    let counts = ok(&vdu(dir, &["convert", "--adapter", "synthetic", "--src", "corpus", "--out", "data"]));
    assert_eq!(counts, json!({"SynKIE": 3, "SynQA": 4, "SynMulti": 2, "SynReceipt": 2, "SynInfo": 2, "SynSlides": 1}));
    let m = Manifest::load(&dir.join("data/manifest.json")).unwrap();
    assert_eq!(m.len(), 14);

    let stats = ok(&vdu(dir, &["stats", "--data", "data"]));
    assert!(stats["ocr_words"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn sample_caps_held_in() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let entry = |ds: &str, i: usize, split, regime| ManifestEntry {
        id: format!("{ds}/{i:06}"),
        path: "records.jsonl".into(),
        line: i + 1,
        offset: 0,
        dataset_id: ds.into(),
        split,
        regime,
    };
    let mut entries: Vec<_> = (0..12_000).map(|i| entry("DocVQA", i, Split::HeldIn, Regime::None)).collect();
    entries.extend((0..50).map(|i| entry("TabFact", i, Split::HeldOut, Regime::CrossTask)));
    std::fs::create_dir(dir.join("data")).unwrap();
    Manifest::new(entries, BTreeMap::new(), BTreeMap::new(), dir.join("data"))
        .save(&dir.join("data/manifest.json"))
        .unwrap();

    let counts = ok(&vdu(dir, &["sample", "--cap", "5000", "--seed", "7"]));
    assert_eq!(counts, json!({"DocVQA": 5000, "TabFact": 50}));
    let first = std::fs::read(dir.join("data/sampled.json")).unwrap();
    ok(&vdu(dir, &["sample", "--cap", "5000", "--seed", "7"]));
    assert_eq!(std::fs::read(dir.join("data/sampled.json")).unwrap(), first);
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    ok(&vdu(dir, &["convert", "--adapter", "synthetic", "--src", "corpus", "--out", "data"]));
    tiny_config(dir, json!({}));
    for run in ["a", "b"] {
        let lm = format!("{run}/lm");
        let model = format!("{run}/model");
        let preds = format!("{run}/preds.jsonl");
        let report = format!("{run}/report.json");
        ok(&vdu(dir, &["--config", "tiny.json", "--seed", "2", "pretrain-lm", "--out", &lm]));
        ok(&vdu(dir, &["--config", "tiny.json", "--seed", "2", "train", "--checkpoint", &lm, "--out", &model]));
        ok(&vdu(dir, &["--config", "tiny.json", "--seed", "2", "predict", "--checkpoint", &model, "--out", &preds]));
        let out = vdu(dir, &["eval", "--predictions", &preds, "--out", &report]);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("held-out avg"));
    }
    for f in ["lm/weights.idrw", "model/weights.idrw", "model/train_log.jsonl", "preds.jsonl", "report.json"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let lines = std::fs::read_to_string(dir.join("a/preds.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);

    let run: Value = serde_json::from_slice(&std::fs::read(dir.join("a/model/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 2);
    assert_eq!(run["train"]["seed"], 2);
    assert_eq!(run["model"]["dim"], 8);
}

#[test]
fn unfreeze_all_flag_reaches_trainer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    ok(&vdu(dir, &["convert", "--adapter", "synthetic", "--src", "corpus", "--out", "data"]));
    tiny_config(dir, json!({}));
    ok(&vdu(dir, &["--config", "tiny.json", "train", "--unfreeze-all", "--out", "m"]));
    let run: Value = serde_json::from_slice(&std::fs::read(dir.join("m/run.json")).unwrap()).unwrap();
    assert_eq!(run["train"]["unfreeze_all"], true);
}

#[test]
fn gradcheck_passes_on_a_micro_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_json(
        &dir.join("micro.json"),
        &json!({"seed": 3, "precision": "f64", "model": {"dim": 4, "lm_dim": 4, "tokens": 2, "heads": 2,
            "docformer_blocks": 1, "vision_blocks": 1, "lm_encoder_blocks": 1, "lm_decoder_blocks": 1,
            "lm_heads": 2, "max_instruction": 48, "max_encoder_len": 128, "max_decoder_len": 8, "init_std": 0.3}}),
    );
    let out = vdu(dir, &["gradcheck", "--config", "micro.json"]);
    let v = ok(&out);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(v["checked"].as_u64().unwrap() > 16_000);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| vdu(dir, args).status.code();

    assert_eq!(code(&["--bogus"]), Some(1));
    assert_eq!(code(&["train"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["gradcheck", "--precision", "f32"]), Some(1));
    assert_eq!(code(&["convert", "--adapter", "nope", "--src", ".", "--out", "x"]), Some(1));
    assert_eq!(code(&["stats", "--data", "missing"]), Some(2));

    write_json(&dir.join("bad.json"), &json!({"sed": 1}));
    assert_eq!(code(&["--config", "bad.json", "stats"]), Some(1));

    small_corpus(dir);
    ok(&vdu(dir, &["convert", "--adapter", "synthetic", "--src", "corpus", "--out", "data"]));
    tiny_config(dir, json!({"train": {"peak_lr": 1e30, "warmup_steps": 1, "max_steps": 6, "batch_size": 2}}));
    let out = vdu(dir, &["--config", "tiny.json", "train", "--unfreeze-all", "--out", "m"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
