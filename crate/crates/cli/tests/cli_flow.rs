//! End-to-end runs of the binary on a small generated dataset.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use intent_reward::rerank::wire::WireRequest;
use intent_reward::rerank::{Candidate, CandidateSet, StateEmbeddings};
use intent_reward::store::load_dataset;
use intent_reward::trainer::StageConfig;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intent-reward"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = bin().args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_line(o: &Output) -> Value {
    serde_json::from_str(stdout(o).trim()).unwrap()
}

/// A three-candidate request built from the step after a wrong click.
fn request(data: &Path) -> String {
    let loaded = load_dataset(data).unwrap();
    let traj = loaded.trajectories.iter().find(|t| t.len() >= 3).unwrap();
    let candidates = traj.steps[..3].iter().map(Candidate::from_step).collect();
    let set = CandidateSet { state: StateEmbeddings::from_trajectory(traj, 1), candidates, resolution: [1920, 1080] };
    serde_json::to_string(&WireRequest::encode(&set, None)).unwrap()
}

#[test]
fn generate_train_evaluate_and_serve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let d = data.to_str().unwrap();

    let gen = json_line(&run(&["gen-synthetic", "--out", d, "--scale", "0.05", "--seed", "4"]));
    assert!(gen["tasks"].as_u64().unwrap() > 0);
    let check = json_line(&run(&["embed-check", "--data", d]));
    assert!(check["max_norm_error"].as_f64().unwrap() < 1e-4);

    let config = dir.path().join("stage.json");
    let stage = StageConfig { epochs: 2, batch_size: 64, ..StageConfig::pretrain() };
    std::fs::write(&config, serde_json::to_string(&stage).unwrap()).unwrap();
    let trained = json_line(&run(&["pretrain", "--data", d, "--out", out.to_str().unwrap(), "--config", config.to_str().unwrap()]));
    assert_eq!(trained["epochs_run"], 2);
    let ckpt = trained["checkpoint"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists());

    let report = stdout(&run(&["eval", "--ckpt", &ckpt, "--data", d, "--pairs", "200"]));
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with("hard,real_inc"));
    assert_eq!(lines[1].split(',').count(), 4);
    assert!(stdout(&run(&["eval", "--ckpt", &ckpt, "--data", d, "--kind", "hard", "--pairs", "50"])).starts_with("hard accuracy"));
    let gap = json_line(&run(&["probe-gap", "--ckpt", &ckpt, "--data", d]));
    assert!(gap["gap"].is_number());

    let req = request(&data);
    let req_path = dir.path().join("req.json");
    std::fs::write(&req_path, &req).unwrap();
    let decision = json_line(&run(&["score", "--ckpt", &ckpt, "--request", req_path.to_str().unwrap()]));
    assert!(decision["selected_index"].as_u64().unwrap() < 3);
    assert_eq!(decision["merged_groups"].as_array().unwrap().len(), 3);

    let served = stdout(&run_with_stdin(&["serve", "--ckpt", &ckpt, "--stdio"], &format!("{req}\nnot json\n{req}\n")));
    let responses: Vec<Value> = served.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(responses.len(), 3);
    assert_eq!(responses[0], decision);
    assert_eq!(responses[1]["error"]["code"], "malformed_request");

    let stats = json_line(&run_with_stdin(&["stats"], &served));
    assert_eq!(stats["total_steps"], 2);
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    assert_eq!(run(&["pretrain"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let missing = run(&["embed-check", "--data", "/nonexistent/dataset"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(run(&["finetune", "--data", d, "--out", d]).status.code(), Some(1));
    assert_eq!(run(&["serve", "--ckpt", "/nonexistent.iscr", "--stdio"]).status.code(), Some(1));
}

#[test]
fn json_errors_are_one_object_on_stderr() {
    let o = run(&["--json-errors", "eval", "--ckpt", "/nonexistent.iscr", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8(o.stderr).unwrap().trim()).unwrap();
    assert!(err["error"]["message"].is_string());
    assert!(err["error"]["causes"].is_array());
}
