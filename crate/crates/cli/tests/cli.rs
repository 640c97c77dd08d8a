use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kep"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/fixtures")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tree_stats_on_fixture_matches_golden() {
    let out = kep(&["tree", "stats", "--tree", &fixture("tree/golden_tree.json")]);
    assert_eq!(out.status.code(), Some(0));
    let got: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("tree/golden_stats.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn tree_build_reproduces_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("tree.json");
    let out = kep(&[
        "tree",
        "build",
        "--diseases",
        &fixture("tree/diseases.jsonl"),
        "--oncotree",
        &fixture("tree/oncotree.jsonl"),
        "--out",
        path(&out_path),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let got: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let want: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("tree/golden_tree.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(kep(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(kep(&["train", "ke"]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = kep(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let out = kep(&["tree", "stats", "--tree", "/nonexistent/tree.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"tau": -1.0}"#).unwrap();
    let out = kep(&[
        "train",
        "ke",
        "--tree",
        &fixture("tree/golden_tree.json"),
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("ke.ckpt")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn file(&self, rel: &str) -> String {
        path(&self.root.join(rel)).to_string()
    }
}

fn small_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let p = Pipeline { _dir: dir, root };
    std::fs::write(
        p.root.join("spec.json"),
        r#"{"entities": 8, "pairs_per_entity": 4, "eval_classes": 3}"#,
    )
    .unwrap();
    std::fs::write(
        p.root.join("train.json"),
        r#"{"ke_epochs": 2, "kep_epochs": 2, "entities_per_batch": 4, "pair_batch": 8, "embed_dim": 32}"#,
    )
    .unwrap();
    let steps: [Vec<String>; 3] = [
        vec![
            "synth".into(),
            "gen".into(),
            "--spec".into(),
            p.file("spec.json"),
            "--seed".into(),
            "3".into(),
            "--out-dir".into(),
            p.file("data"),
        ],
        vec![
            "train".into(),
            "ke".into(),
            "--tree".into(),
            p.file("data/tree.json"),
            "--config".into(),
            p.file("train.json"),
            "--out".into(),
            p.file("ke.ckpt"),
        ],
        vec![
            "train".into(),
            "kep".into(),
            "--pairs".into(),
            p.file("data/pairs.jsonl"),
            "--ke".into(),
            p.file("ke.ckpt"),
            "--config".into(),
            p.file("train.json"),
            "--out-dir".into(),
            p.file("models"),
        ],
    ];
    for args in &steps {
        let out = kep(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    p
}

#[test]
fn pipeline_runs_every_evaluation() {
    let p = small_pipeline();
    for args in [
        vec![
            "eval",
            "retrieval",
            "--pairs",
            &p.file("data/pairs_heldout.jsonl"),
            "--models",
            &p.file("models"),
            "--task",
            "l2t",
        ],
        vec![
            "eval",
            "zeroshot",
            "--dataset",
            &p.file("data/patches.jsonl"),
            "--classes",
            &p.file("data/classes.json"),
            "--models",
            &p.file("models"),
            "--trials",
            "5",
        ],
        vec![
            "eval",
            "wsi",
            "--dataset",
            &p.file("data/wsi.jsonl"),
            "--classes",
            &p.file("data/classes.json"),
            "--models",
            &p.file("models"),
            "--trials",
            "5",
            "--pooling",
            "vote",
        ],
        vec![
            "eval",
            "retrieval",
            "--pairs",
            &p.file("data/pairs_heldout.jsonl"),
            "--models",
            &p.file("models"),
            "--task",
            "i2l",
            "--encoder",
            "knowledge",
        ],
    ] {
        let out = kep(&args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let _: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    }
    let history = std::fs::read_to_string(p.root.join("ke.history.jsonl")).unwrap();
    assert!(history.lines().count() > 1);
}

#[test]
fn dimension_mismatch_is_a_data_error_naming_the_file() {
    let p = small_pipeline();
    let bad = p.root.join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"dim\": 3}\n{\"id\": \"p0\", \"image_features\": [0.1, 0.2, 0.3], \"caption\": \"entA cells\"}\n",
    )
    .unwrap();
    let out = kep(&[
        "eval",
        "retrieval",
        "--pairs",
        path(&bad),
        "--models",
        &p.file("models"),
        "--task",
        "i2t",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
}

#[test]
fn malformed_record_is_reported_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("pairs.jsonl");
    std::fs::write(
        &bad,
        "{\"dim\": 2}\n{\"id\": \"ok\", \"image_features\": [0.1, 0.2], \"caption\": \"a\"}\n{\"id\": \"short\", \"image_features\": [0.1], \"caption\": \"b\"}\n",
    )
    .unwrap();
    let ke = dir.path().join("ke.ckpt");
    let out = kep(&[
        "train",
        "kep",
        "--pairs",
        path(&bad),
        "--ke",
        path(&ke),
        "--out-dir",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("short"));
}

#[test]
fn gradient_check_passes() {
    let out = kep(&["check", "grad", "--batches", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}
