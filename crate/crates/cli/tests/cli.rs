use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config() -> Value {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    // an untrained surrogate is enough for plumbing checks
    cfg["pretrain"] = json!({ "target_accuracy": 0.0 });
    cfg["training"]["max_steps"] = json!(12);
    cfg["training"]["checkpoint_every"] = json!(6);
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.dir.path().join("cfg.json");
        let out = self.out();
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        Command::new(env!("CARGO_BIN_EXE_liveedit")).args(&full).output().unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.out().join(name)).unwrap()).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn error_record(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn trained(cfg: &Value) -> Workspace {
    let ws = Workspace::new(cfg);
    let o = ws.run(&["pretrain"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ws.run(&["train-editor"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ws
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_liveedit")).arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_liveedit"))
        .args(["eval", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(error_record(&o)["exit_code"], 2);

    let mut bad = tiny_config();
    bad["surrogate"]["l_e"] = json!(9);
    let ws = Workspace::new(&bad);
    assert_eq!(code(&ws.run(&["pretrain"])), 2);
}

#[test]
fn provenance_is_written_before_work() {
    let ws = Workspace::new(&tiny_config());
    let o = ws.run(&["pretrain"]);
    assert_eq!(code(&o), 0);
    let cfg = ws.json("run_config.json");
    assert_eq!(cfg["seed"], 7);
    assert_eq!(ws.json("versions.json")["command"], "pretrain");
    assert!(ws.out().join("surrogate.json").exists());
    assert!(ws.out().join("stream.jsonl").exists());
    assert!(!ws.out().join(".lock").exists());
}

#[test]
fn unconverged_pretraining_exits_with_four() {
    let mut cfg = tiny_config();
    cfg["pretrain"] = json!({ "target_accuracy": 1.0, "max_steps": 2, "eval_every": 1 });
    let ws = Workspace::new(&cfg);
    let o = ws.run(&["pretrain"]);
    assert_eq!(code(&o), 4);
    assert_eq!(error_record(&o)["error"], "numerical");
}

#[test]
fn eval_on_an_empty_repository_reports_perfect_locality() {
    let ws = trained(&tiny_config());
    let o = ws.run(&["eval"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = ws.json("metrics.json");
    assert_eq!(m["t_loc"], 1.0);
    assert_eq!(m["m_loc"], 1.0);
    assert!(m["rel"].is_null());
}

#[test]
fn edit_is_byte_deterministic_and_eval_assert_fails_untrained() {
    let ws = trained(&tiny_config());
    assert_eq!(code(&ws.run(&["edit"])), 0);
    let repo = ws.out().join("repository.json");
    let first = std::fs::read(&repo).unwrap();
    assert_eq!(code(&ws.run(&["edit"])), 0);
    assert_eq!(std::fs::read(&repo).unwrap(), first);
    assert_eq!(ws.json("repository.json")["count"], 6);

    // twelve steps of training cannot meet the acceptance thresholds
    let o = ws.run(&["eval", "--assert"]);
    assert_eq!(code(&o), 5);
    assert_eq!(error_record(&o)["error"], "threshold");
    assert!(ws.out().join("metrics.json").exists());
}

#[test]
fn mismatched_surrogate_is_refused_with_three() {
    let ws = trained(&tiny_config());
    let mut other = tiny_config();
    other["surrogate"]["l_e"] = json!(0);
    std::fs::write(ws.dir.path().join("cfg.json"), serde_json::to_string(&other).unwrap()).unwrap();
    let o = ws.run(&["edit"]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_record(&o)["error"], "fingerprint");
}

#[test]
fn a_held_lock_blocks_a_second_command() {
    let ws = Workspace::new(&tiny_config());
    std::fs::create_dir_all(ws.out()).unwrap();
    std::fs::write(ws.out().join(".lock"), "").unwrap();
    let o = ws.run(&["pretrain"]);
    assert_ne!(code(&o), 0);
    assert!(!ws.out().join("surrogate.json").exists());
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let ws = Workspace::new(&tiny_config());
    let o = ws.run(&["gradcheck", "--sample", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = ws.json("gradcheck.json");
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(r["terms"].as_array().unwrap().len(), 7);
}

#[test]
fn report_summarises_existing_artifacts() {
    let ws = trained(&tiny_config());
    assert_eq!(code(&ws.run(&["eval", "--lifelong"])), 0);
    let o = ws.run(&["report"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ws.out().join("report/summary.json").exists());
    let traj = std::fs::read_to_string(ws.out().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 3);
}
