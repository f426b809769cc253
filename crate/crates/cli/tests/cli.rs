use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn morl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morl"))
        .args(args)
        .env_remove("MORL_RUN_DIR")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

fn seeds() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../seeds")
}

fn seed(name: &str) -> String {
    seeds().join(name).display().to_string()
}

/// Help output is part of the interface. Set UPDATE_SNAPSHOTS=1 to rewrite.
#[test]
fn help_matches_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let commands = [
        "", "evaluate", "synthesize", "repair", "check", "clone", "train", "loop", "compare", "serve",
    ];
    for cmd in commands {
        let mut args: Vec<&str> = if cmd.is_empty() { vec![] } else { vec![cmd] };
        args.push("--help");
        let text = stdout(&morl(&args));
        let path = dir.join(format!("{}.txt", if cmd.is_empty() { "morl" } else { cmd }));
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &text).unwrap();
        } else {
            let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(text, expected, "help for `{cmd}` changed; rerun with UPDATE_SNAPSHOTS=1");
        }
    }
}

#[test]
fn evaluate_seed_programs() {
    let worst = stdout(&morl(&["evaluate", "--program", &seed("worst.tree"), "--episodes", "25", "--seed", "0"]));
    assert!(worst.starts_with("mean="));
    let mean = field(&worst, "mean");
    assert!((7.0..=13.0).contains(&mean), "{worst}");
    assert!(field(&worst, "std") >= 0.0);

    let near = stdout(&morl(&["evaluate", "--program", "near_optimal"]));
    assert_eq!(field(&near, "mean"), 200.0);
}

#[test]
fn json_output_is_one_object() {
    let out = stdout(&morl(&["--json", "evaluate", "--program", "worst"]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["mean"].as_f64().unwrap() > 0.0);
    assert!(v["std"].is_number());
}

#[test]
fn repair_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("i.tree");
    let report = dir.path().join("report.json");
    let text = stdout(&morl(&[
        "repair",
        "--program",
        &seed("worst.tree"),
        "--edits",
        &seed("worst_to_intermediate.edits"),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(field(&text, "edits"), 2.0);
    assert_eq!(field(&text, "violation_rate"), 0.0);
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(seeds().join("intermediate.tree")).unwrap());
    let eval = stdout(&morl(&["evaluate", "--program", out.to_str().unwrap()]));
    let mean = field(&eval, "mean");
    assert!((64.0..=200.0).contains(&mean), "{eval}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["before"][0]["violation_rate"], 1.0);
}

#[test]
fn check_reports_each_constraint() {
    let grid = stdout(&morl(&["check", "--program", "intermediate"]));
    assert!(grid.contains("constraint=SameDirectionAsPole checked=14641"), "{grid}");
    assert_eq!(field(grid.lines().last().unwrap(), "total_violation_rate"), 0.0);

    // The 0.06 split leaves a thin band of θ̇ in (0.01, 0.06] pushed left,
    // which the grid misses but uniform sampling finds.
    let text = stdout(&morl(&["check", "--program", "intermediate", "--sampler", "uniform", "--samples", "5000"]));
    assert!(text.contains("constraint=SameDirectionAsPole checked=5000"), "{text}");
    let rate = field(text.lines().last().unwrap(), "total_violation_rate");
    assert!(rate > 0.0 && rate < 0.02, "{rate}");
}

#[test]
fn clone_train_synthesize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let cloned = stdout(&morl(&[
        "clone", "--program", "intermediate", "--out", &p("pi.json"), "--epochs", "200", "--dataset-size", "300",
        "--eval-episodes", "3", "--hidden", "8",
    ]));
    assert!(field(&cloned, "holdout_agreement") > 0.5, "{cloned}");

    stdout(&morl(&[
        "train", "--checkpoint", &p("pi.json"), "--iterations", "2", "--out", &p("pi2.json"), "--metrics",
        &p("m.jsonl"), "--trajectories-per-iteration", "2",
    ]));
    let metrics = fs::read_to_string(p("m.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for key in ["iteration", "mean_return", "std_return", "mean_kl", "surrogate_improvement", "accepted_backtrack_index"] {
        assert!(records[0].get(key).is_some(), "missing {key}");
    }

    let synth = stdout(&morl(&[
        "synthesize", "--checkpoint", &p("pi2.json"), "--out", &p("p.tree"), "--dagger-iterations", "2",
        "--traces-per-iteration", "3", "--eval-episodes", "2",
    ]));
    assert!(field(&synth, "depth") <= 3.0);
    stdout(&morl(&["evaluate", "--program", &p("p.tree"), "--episodes", "2"]));
    stdout(&morl(&["evaluate", "--checkpoint", &p("pi2.json"), "--episodes", "2"]));
}

#[test]
fn unknown_flag_exits_one() {
    let out = morl(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(morl(&["--help"]).status.code(), Some(0));
    assert_eq!(morl(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let out = morl(&["evaluate", "--program", "/nonexistent/p.tree"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.edits");
    fs::write(&bad, "set-leaf-action 9 1\n").unwrap();
    let out = morl(&[
        "repair", "--program", "worst", "--edits", bad.to_str().unwrap(), "--out",
        dir.path().join("x.tree").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.tree").exists());
}

#[test]
fn loop_reads_run_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"max_outer_iterations": 1, "eval_episodes": 2,
            "repair_mode": {"auto": {"constraints": ["builtin"], "budget": 5}},
            "synthesis": {"dagger_iterations": 1, "traces_per_iteration": 2, "max_tree_depth": 2, "min_samples_leaf": 5, "eval_episodes": 2},
            "bc": {"epochs": 20, "learning_rate": 0.01, "dataset_size": 100, "rollout_fraction": 0.5, "holdout_fraction": 0.1, "eval_episodes": 2, "seed": 0},
            "trpo_iterations_per_cycle": 1}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_morl"))
        .args(["loop", "--config", config.to_str().unwrap()])
        .env("MORL_RUN_DIR", &run)
        .output()
        .unwrap();
    let text = stdout(&out);
    assert_eq!(field(&text, "cycles"), 1.0);
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("report.json").exists());
    assert!(run.join("programs/P_0_repaired.tree").exists());
}

#[test]
fn compare_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"bc": {"epochs": 20, "learning_rate": 0.01, "dataset_size": 100, "rollout_fraction": 0.5, "holdout_fraction": 0.1, "eval_episodes": 2, "seed": 0},
            "trpo": {"trajectories_per_iteration": 2}}"#,
    )
    .unwrap();
    let csv = dir.path().join("out.csv");
    let text = stdout(&morl(&[
        "compare", "--arms", "worst,near_optimal", "--iterations", "2", "--seeds", "2", "--out",
        csv.to_str().unwrap(), "--config", config.to_str().unwrap(),
    ]));
    assert!(text.contains("arm=worst"), "{text}");
    let body = fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("iteration,arm,seed,mean_return"));
    assert_eq!(lines.count(), 2 * 2 * 2);
}
