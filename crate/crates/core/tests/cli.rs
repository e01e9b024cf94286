use std::path::Path;
use std::process::{Command, Output};

fn fadvlp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fadvlp"))
        .args(args)
        .current_dir(dir)
        .env_remove("FADVLP_THREADS")
        .output()
        .unwrap()
}

const TINY: &str = r#"{
    "pretrain": {"stage1_steps": 4, "stage2_steps": 4, "batch_size": 8},
    "finetune": {"steps": 3, "batch_size": 8},
    "protocol": {"repeats": 1},
    "generation": {"max_tokens": 5}
}"#;

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = fadvlp(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(fadvlp(&["gen-data", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(fadvlp(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn invalid_config_leaves_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"corpus_size": 10, "pretrian": {}}"#).unwrap();
    let out = fadvlp(&["pipeline", "--config", "bad.json", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run").exists());
    std::fs::write(dir.path().join("bad.json"), r#"{"holdout_fraction": 2.0}"#).unwrap();
    let out = fadvlp(&["gen-data", "--config", "bad.json", "--out-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run").exists());
    let out = fadvlp(&["gen-data", "--out-dir", "run", "--threads", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("taken"), "").unwrap();
    let out = fadvlp(&["gen-data", "--n", "20", "--out-dir", "taken"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let out = fadvlp(args, d);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    };
    ok(&["gen-data", "--n", "150", "--seed", "7", "--out-dir", "run"]);
    for f in ["corpus.jsonl", "schema.json", "split.json", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&["build-triplets", "--corpus", "run/corpus.jsonl", "--sample-size", "1000", "--seed", "7", "--out-dir", "run"]);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/triplet_stats.json")).unwrap()).unwrap();
    assert!(stats["built"].as_u64().unwrap() > 100);
    let common = ["--config", "tiny.json", "--seed", "7", "--out-dir", "run"];
    let with = |head: &[&'static str]| -> Vec<&'static str> { [head, &common[..]].concat() };
    ok(&with(&["pretrain", "--corpus", "run/corpus.jsonl", "--triplets", "run/triplets.jsonl"]));
    assert!(d.join("run/pretrain_loss.csv").exists());
    ok(&with(&["finetune", "--task", "irtf", "--checkpoint", "run/pretrain.ckpt", "--corpus", "run/corpus.jsonl"]));
    ok(&with(&["eval", "--task", "irtf", "--checkpoint", "run/finetune_irtf.ckpt", "--gallery", "run/corpus.jsonl"]));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    let metrics = &reports[0]["metrics"];
    assert!(metrics.get("average/r@10").is_some() && metrics.get("average/r@50").is_some(), "{metrics}");

    ok(&with(&["infer", "--checkpoint", "run/pretrain.ckpt", "--corpus", "run/corpus.jsonl", "--mode", "caption", "--id", "3"]));
    ok(&with(&[
        "infer", "--checkpoint", "run/pretrain.ckpt", "--corpus", "run/corpus.jsonl", "--mode", "retrieve", "--id", "3",
        "--text", "is blue", "--top-k", "5",
    ]));
    let inf: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/infer.json")).unwrap()).unwrap();
    assert_eq!(inf["ranked"].as_array().unwrap().len(), 5);
    let out = fadvlp(
        &with(&["infer", "--checkpoint", "run/pretrain.ckpt", "--corpus", "run/corpus.jsonl", "--mode", "relative-caption", "--id", "3"]),
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let out = fadvlp(&with(&["eval", "--task", "itr", "--checkpoint", "run/missing.ckpt", "--gallery", "run/corpus.jsonl"]), d);
    assert_eq!(out.status.code(), Some(1));
}
