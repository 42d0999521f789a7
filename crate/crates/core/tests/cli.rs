use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn descprompt(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_descprompt"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();

    ok(&descprompt(
        cwd,
        &["dataset", "build", "--task", "synthetic", "--out", "data"],
    ));
    assert!(cwd.join("data/manifest.jsonl").exists());
    assert!(cwd.join("data/testbed.json").exists());

    let stdout = ok(&descprompt(
        cwd,
        &[
            "optimize",
            "--out",
            "run",
            "--manifest",
            "data/manifest.jsonl",
        ],
    ));
    assert!(stdout.contains("q*"));
    for f in [
        "config.json",
        "result.json",
        "trajectory.csv",
        "cache_stats.json",
    ] {
        assert!(cwd.join("run").join(f).exists(), "{f} missing");
    }

    let stdout = ok(&descprompt(
        cwd,
        &[
            "evaluate",
            "--run",
            "run",
            "--with-init",
            "--zero-shot",
            "--silhouette",
        ],
    ));
    assert!(stdout.contains("| Model | Metric |"));
    assert!(cwd.join("run/report.json").exists());
    assert!(cwd.join("run/embeddings.csv").exists());

    let stdout = ok(&descprompt(cwd, &["report", "--run", "run"]));
    assert!(stdout.starts_with("iteration,phase,best_accuracy,best_diversity,tau,pool"));

    ok(&descprompt(
        cwd,
        &["review", "export", "--run", "run", "--n", "6"],
    ));
    let bundle = std::fs::read_to_string(cwd.join("run/review/bundle.csv")).unwrap();
    let mut ratings =
        String::from("masked_item_id,rater_id,precision_score,accuracy_score,comments\n");
    for line in bundle.lines().skip(1) {
        let id = line.split(',').next().unwrap();
        writeln!(ratings, "{id},r1,3,4,fine").unwrap();
    }
    std::fs::write(cwd.join("run/review/ratings.csv"), ratings).unwrap();
    let stdout = ok(&descprompt(
        cwd,
        &["review", "ingest", "--ratings", "run/review/ratings.csv"],
    ));
    assert!(stdout.contains("6 ratings"));
    assert!(stdout.contains("EXPERT FEEDBACK"));

    let stdout = ok(&descprompt(
        cwd,
        &[
            "optimize",
            "--out",
            "run-fb",
            "--manifest",
            "data/manifest.jsonl",
            "--feedback",
            "run/review/ratings.csv",
        ],
    ));
    assert!(stdout.contains("q*"));

    let stdout = ok(&descprompt(cwd, &["cache", "stats", "--run", "run"]));
    assert!(stdout.contains("optimize: hits"));
    let stdout = ok(&descprompt(cwd, &["cache", "clear", "--run", "run"]));
    assert!(!stdout.is_empty());
}

#[test]
fn config_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    ok(&descprompt(
        cwd,
        &["dataset", "build", "--task", "synthetic", "--out", "data"],
    ));
    std::fs::write(
        cwd.join("config.toml"),
        "[run]\nb = 2\nn_phase1 = 1\nn_phase2 = 2\n",
    )
    .unwrap();
    ok(&descprompt(
        cwd,
        &[
            "--config",
            "config.toml",
            "optimize",
            "--out",
            "run",
            "--manifest",
            "data/manifest.jsonl",
            "--l",
            "3",
        ],
    ));
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cwd.join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(snapshot["run"]["b"], 2);
    assert_eq!(snapshot["run"]["l"], 3);
    assert_eq!(snapshot["run"]["n_phase1"], 1);
}

#[test]
fn validation_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = descprompt(
        tmp.path(),
        &[
            "dataset",
            "build",
            "--task",
            "bach-n-ic",
            "--catalog",
            "missing",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let out = descprompt(tmp.path(), &["optimize", "--out", "r", "--api-key", "sk-x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = descprompt(tmp.path(), &["evaluate", "--run", "nothing-here"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn remote_backend_without_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    ok(&descprompt(
        cwd,
        &["dataset", "build", "--task", "synthetic", "--out", "data"],
    ));
    std::fs::write(
        cwd.join("remote.toml"),
        "[backend]\nkind = \"remote\"\n[backend.remote]\ndialect = \"chat-completions\"\nbase_url = \"http://127.0.0.1:9\"\napi_key_env = \"DESCPROMPT_TEST_UNSET_KEY\"\nmodel = \"m\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_descprompt"))
        .current_dir(cwd)
        .env_remove("DESCPROMPT_TEST_UNSET_KEY")
        .args([
            "--config",
            "remote.toml",
            "optimize",
            "--out",
            "run",
            "--manifest",
            "data/manifest.jsonl",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DESCPROMPT_TEST_UNSET_KEY"));
}
