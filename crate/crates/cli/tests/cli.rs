use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/config.toml")
}

fn recgen(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recgen"))
        .arg("--config")
        .arg(fixture_config())
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn full_run_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = recgen(&["run"], dir.path());
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(dir.path().join("manifest.json").exists());

    let eval = recgen(&["evaluate", "--what", "success,hallucination,recall"], dir.path());
    assert!(eval.status.success(), "{}", stderr(&eval));
    let table = stdout(&eval);
    assert!(table.contains("success"));
    assert!(table.contains("recall@10"));

    let analyze = recgen(&["analyze", "distributions"], dir.path());
    assert!(analyze.status.success(), "{}", stderr(&analyze));
    let value: serde_json::Value = serde_json::from_str(&stdout(&analyze)).unwrap();
    assert!(value["energy_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["ingest"][..],
        &["build-index"],
        &["reformulate", "--mode", "original"],
        &["retrieve", "--k", "5"],
        &["gen-g-data", "--negatives", "random", "--k-train", "3", "--cot", "off"],
    ] {
        let out = recgen(args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let g = std::fs::read_to_string(dir.path().join("g_train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(g.lines().next().unwrap()).unwrap();
    assert_eq!(first["candidate_ids"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_flag_reaches_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = recgen(&["--seed", "99", "ingest"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("instances.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["seed"], 99);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(recgen(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(recgen(&["gen-g-data", "--negatives", "easy"], dir.path()).status.code(), Some(1));
    assert_eq!(recgen(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = recgen(&["retrieve"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("requires build-index"), "{}", stderr(&out));
    let out = recgen(&["retrieve", "--k", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k must be ≥ 1"), "{}", stderr(&out));
}

#[test]
fn validate_config_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("minimal.toml");
    std::fs::write(
        &path,
        r#"seed = 1
[data]
format = "canonical"
catalog = "c.jsonl"
train = "t.jsonl"
test = "s.jsonl"
[embedder]
backend = "hashed-test"
dim = 16
[endpoints.pseudo]
kind = "mock"
script = "p.jsonl"
[endpoints.qr]
kind = "mock"
script = "q.jsonl"
[endpoints.generator]
kind = "http"
url = "http://localhost:1"
model = "g"
"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_recgen"))
        .args(["--config", path.to_str().unwrap(), "validate-config"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let echoed = stdout(&out);
    assert!(echoed.contains("k = 50"), "{echoed}");
    assert!(echoed.contains("temperature = 0.1"));
    assert!(echoed.contains("token_budget = 4096"));

    std::fs::write(&path, std::fs::read_to_string(&path).unwrap().replace("[embedder]", "[retreiver]")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_recgen"))
        .args(["--config", path.to_str().unwrap(), "validate-config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("did you mean `embedder`"), "{}", stderr(&out));
}
