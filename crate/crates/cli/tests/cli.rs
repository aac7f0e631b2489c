//! Command-line behavior: exit codes, config precedence, structured logs.

use std::path::Path;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subjectforge"))
}

fn vocabulary_path() -> String {
    format!("{}/../../assets/vocabulary.txt", env!("CARGO_MANIFEST_DIR"))
}

fn forge(out: &Path, scenes: u64, extra: &[&str]) -> Output {
    binary()
        .args([
            "forge",
            "--scenes",
            &scenes.to_string(),
            "--vocabulary",
            &vocabulary_path(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
            "--workers",
            "2",
        ])
        .args(extra)
        .output()
        .expect("spawn forge")
}

#[test]
fn bad_vocabulary_path_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args([
            "forge",
            "--scenes",
            "1",
            "--vocabulary",
            "/definitely/not/here.txt",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn zero_retained_is_domain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let output = forge(dir.path(), 5, &["--fault-t2i", "1.0"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn validate_missing_manifest_is_usage_error() {
    let output =
        binary().args(["validate", "--manifest", "/nope/manifest.jsonl"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn validate_empty_manifest_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let output = binary()
        .args(["validate", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("empty"), "no warning on empty manifest: {stderr}");
}

#[test]
fn corrupted_layout_fails_validation_with_scene_id() {
    let dir = tempfile::tempdir().unwrap();
    let output = forge(dir.path(), 3, &[]);
    assert_eq!(output.status.code(), Some(0));

    let manifest = dir.path().join("manifest.jsonl");
    let body = std::fs::read_to_string(&manifest).unwrap();
    let first_line = body.lines().next().unwrap();
    let scene_id = serde_json::from_str::<serde_json::Value>(first_line).unwrap()["scene_id"]
        .as_str()
        .unwrap()
        .to_string();
    std::fs::write(&manifest, body.replacen("</patch>", "", 1)).unwrap();

    let output = binary()
        .args(["validate", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains(&scene_id), "diagnostic lacks scene id: {stderr}");
}

#[test]
fn flag_beats_config_file_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, "n_max = 4\nlambda = 0.2\n").unwrap();

    // File only: n_max 4 and lambda 0.2 land in provenance.
    let out_file = dir.path().join("file_only");
    let output = forge(&out_file, 2, &["--config", config_path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let body = std::fs::read_to_string(out_file.join("manifest.jsonl")).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(record["provenance"]["config"]["n_max"], 4);
    assert_eq!(record["provenance"]["config"]["lambda"], 0.2);

    // Flag overrides the file; untouched file keys still apply.
    let out_flag = dir.path().join("flag_wins");
    let output = forge(
        &out_flag,
        2,
        &["--config", config_path.to_str().unwrap(), "--n-max", "6"],
    );
    assert_eq!(output.status.code(), Some(0));
    let body = std::fs::read_to_string(out_flag.join("manifest.jsonl")).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(record["provenance"]["config"]["n_max"], 6);
    assert_eq!(record["provenance"]["config"]["lambda"], 0.2);
}

#[test]
fn log_json_emits_one_object_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let output = forge(dir.path(), 4, &["--log-json"]);
    assert_eq!(output.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let events: Vec<serde_json::Value> = stderr
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect();
    assert!(!events.is_empty());
    for event in &events {
        assert_eq!(event["event"], "scene");
        assert!(event["status"] == "committed" || event["status"] == "failed");
    }
}

#[test]
fn stats_renders_forged_run() {
    let dir = tempfile::tempdir().unwrap();
    let output = forge(dir.path(), 3, &[]);
    assert_eq!(output.status.code(), Some(0));
    let output = binary()
        .args(["stats", "--stats", dir.path().join("stats.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("Final retained samples"));
    assert!(stdout.contains("t2i_mismatch"));
}

#[test]
fn select_missing_instruction_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = binary()
        .args([
            "select",
            "--n",
            "4",
            "--instruction",
            "/missing/instr.txt",
            "--subjects",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn eval_with_unresolvable_images_is_domain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("eval.jsonl");
    std::fs::write(
        &manifest,
        r#"{"generated": "gone.png", "references": ["also_gone.png"], "instruction": "x", "subject_count": 2}"#,
    )
    .unwrap();
    let output = binary()
        .args(["eval", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn augment_then_validate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let output = forge(dir.path(), 5, &[]);
    assert_eq!(output.status.code(), Some(0));
    let manifest = dir.path().join("manifest.jsonl");

    let output = binary()
        .args(["augment", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));

    let derived = dir.path().join("derived.jsonl");
    if std::fs::metadata(&derived).map(|m| m.len() > 0).unwrap_or(false) {
        let output = binary()
            .args(["validate", "--manifest", derived.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0));
    }

    // Re-running augment adds nothing (resume idempotence).
    let before = std::fs::read(&derived).unwrap_or_default();
    let output = binary()
        .args(["augment", "--manifest", manifest.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(std::fs::read(&derived).unwrap_or_default(), before);
}
