use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn backsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backsense")).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_then_infer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("obs.txt");
    let truth = dir.path().join("truth.json");
    let out = backsense(&[
        "simulate",
        "--seed",
        "3",
        "--out",
        dump.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(truth["x"].as_array().unwrap().len(), 4);
    assert_eq!(truth["true_t"].as_array().unwrap().len(), 100);

    let from_dump = backsense(&["infer", "-a", "GEM-MAP", "-i", dump.to_str().unwrap(), "--seed", "3"]);
    assert!(from_dump.status.success(), "{}", String::from_utf8_lossy(&from_dump.stderr));
    let fresh = backsense(&["infer", "-a", "GEM-MAP", "--seed", "3"]);
    assert!(fresh.status.success());
    let (a, b) = (json(&from_dump), json(&fresh));
    assert_eq!(a["x_hat"], b["x_hat"]);
    assert_eq!(b["x_true"], truth["x"]);
    assert!(b["rel_error"].as_f64().unwrap() < 0.2);
}

#[test]
fn trace_file_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    let out = backsense(&["infer", "-a", "EM-ML", "--slots", "50", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let iterations = json(&out)["iterations"].as_u64().unwrap() as usize;
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), iterations + 1);
}

#[test]
fn naive_on_a_dump_needs_the_channel_gain() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("obs.txt");
    assert!(backsense(&["simulate", "-o", dump.to_str().unwrap()]).status.success());
    let out = backsense(&["infer", "-a", "NAIVE", "-i", dump.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = backsense(&["infer", "-a", "NAIVE", "-i", dump.to_str().unwrap(), "--oracle-h", "3.0"]);
    assert!(out.status.success());
}

#[test]
fn bad_input_exits_with_one() {
    assert_eq!(backsense(&["infer", "-a", "NOPE"]).status.code(), Some(1));
    assert_eq!(backsense(&["infer", "-a", "VI", "--slots", "0"]).status.code(), Some(1));
    assert_eq!(backsense(&["infer", "-a", "EM-ML", "-i", "/nonexistent/dump"]).status.code(), Some(1));
    assert_eq!(backsense(&["experiment", "/nonexistent/config.json"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.txt");
    fs::write(&garbage, "not a dump\n").unwrap();
    assert_eq!(backsense(&["infer", "-a", "EM-ML", "-i", garbage.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(backsense(&["--help"]).status.code(), Some(0));
}

fn run_config(dir: &Path, config: &Path) -> String {
    let out = backsense(&["experiment", config.to_str().unwrap(), "-o", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::read_to_string(dir.join("tiny.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn experiment_is_deterministic_and_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(
        &config,
        r#"{"name": "tiny", "sweep": {"variable": "L", "values": [20, 50]},
            "antennas": [2], "trials": 3, "seed_base": 9,
            "algorithms": ["EM-ML", "GEM-MAP", "NAIVE"]}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run_config(&a, &config);
    assert_eq!(first, run_config(&b, &config));
    assert_eq!(first.lines().count(), 1 + 2 * 3 * 3);
    assert!(fs::read_dir(&a)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn selftest_passes() {
    let out = backsense(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS")));
}
