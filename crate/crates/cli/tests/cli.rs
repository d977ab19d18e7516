//! End-to-end checks of the binary: exit codes, report plumbing, and
//! byte-level reproducibility, all against the compiled-in fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lietext"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// Small linear run that finishes in well under a second.
fn tiny_config(dir: &Path, checkpoint: Option<&Path>) -> PathBuf {
    let ckpt = match checkpoint {
        Some(p) => format!(", \"checkpoint\": {:?}", p.to_str().unwrap()),
        None => String::new(),
    };
    let body = format!(
        r#"{{
  "model": {{ "arch": "linear", "embedding_dim": 16, "dropout": 0.0 }},
  "data": {{
    "name": "binary64",
    "split": {{ "policy": "standard", "dev_fraction": 0.25 }},
    "embeddings": "fixture"
  }},
  "optimizer": {{ "kind": "adadelta", "batch": 16 }},
  "max_epochs": 3,
  "patience": 3,
  "seed": 11{ckpt}
}}"#
    );
    write_config(dir, "tiny.json", &body)
}

#[test]
fn train_writes_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = tiny_config(dir.path(), Some(&ckpt));
    let report = dir.path().join("report.json");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("headline accuracy"));
    assert!(ckpt.exists());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["seed"], 11);
    assert_eq!(parsed["data"]["train_examples"], 64);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = tiny_config(dir.path(), Some(&ckpt));
    let mut artifacts = Vec::new();
    for tag in ["a", "b"] {
        let report = dir.path().join(format!("{tag}.json"));
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--fixture",
            "--out",
            report.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let mut parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        parsed["meta"]["wall_seconds"] = 0.0.into();
        artifacts.push((std::fs::read(&ckpt).unwrap(), parsed.to_string()));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "checkpoints differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "reports differ outside meta");
}

#[test]
fn override_changes_config_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), None);
    let report = dir.path().join("report.json");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--override",
        "max_epochs=2",
        "--override",
        "optimizer.rho=0.9",
        "--seed",
        "99",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["config"]["max_epochs"], 2);
    assert_eq!(parsed["config"]["optimizer"]["rho"], 0.9);
    assert_eq!(parsed["seed"], 99);
}

#[test]
fn unknown_config_key_is_named_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "typo.json",
        r#"{
  "model": { "arch": "linear" },
  "data": { "name": "binary64" },
  "optimizer": { "kind": "adadelta" },
  "bacth_size": 50
}"#,
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("bacth_size"), "error does not name the key: {err}");
    assert!(err.contains("/bacth_size"), "error lacks the pointer: {err}");
}

#[test]
fn nested_unknown_key_gets_nested_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "typo.json",
        r#"{
  "model": { "arch": "linear", "filers": 100 },
  "data": { "name": "binary64" },
  "optimizer": { "kind": "adadelta" }
}"#,
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/model/filers"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_runtime_failure() {
    let out = run(&["train", "--config", "/nonexistent/nope.json", "--fixture"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_without_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), None);
    let out = run(&["eval", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("checkpoint"));
}

#[test]
fn train_then_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = tiny_config(dir.path(), Some(&ckpt));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let eval_out = dir.path().join("eval.json");
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("dev-holdout"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(parsed["examples"], 16);

    let csv = dir.path().join("repr.csv");
    let out = run(&[
        "export-repr",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 65, "header plus one row per sentence");
    assert!(text.starts_with("id,label,v_0"));
}

#[test]
fn export_repr_requires_out() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = tiny_config(dir.path(), Some(&ckpt));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 0);
    let out = run(&["export-repr", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--out"));
}

#[test]
fn probe_runs_on_fixture_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let cfg = tiny_config(dir.path(), Some(&ckpt));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--fixture"]);
    assert_eq!(code(&out), 0);
    let report = dir.path().join("probe.json");
    let out = run(&[
        "probe",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["pairs"], 24);
    assert!(parsed["pearson"].is_number());
}

#[test]
fn gradcheck_passes_in_f64_and_rejects_f32() {
    let out = run(&["gradcheck", "--model", "sclie"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("pass"));

    let out = run(&["gradcheck", "--model", "sclie", "--precision", "f32"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn parity_is_bitwise_exact() {
    let out = run(&["parity", "--instances", "25"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("25/25"));
}

#[test]
fn fetch_manifest_prints_json() {
    let out = run(&["fetch-manifest"]);
    assert_eq!(code(&out), 0);
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(parsed["expected_files"].is_object());
}

#[test]
fn shipped_fixture_configs_parse_and_train() {
    // keep this cheap: two epochs of the smallest shipped config
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs/fixture_linear.json");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--override",
        "max_epochs=2",
        "--override",
        "patience=2",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
}

#[test]
fn divergence_exits_2() {
    // adadelta steps are scale-normalized, so genuine overflow needs the
    // raw sgd rule; a huge learning rate blows the weights past f32 range
    // within an epoch or two
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), None);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        "--override",
        "optimizer={\"kind\":\"sgd\",\"batch\":16,\"lr\":1e12}",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "stderr: {}", stderr(&out));
}
