use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "synthetic": {"n_concepts": 12, "samples_per_concept": 20},
  "train": {"epochs": 2, "warmup_iters": 4, "batch_size": 16},
  "model": {"teacher_hidden": 16, "student_hidden": 8, "embed_dim": 8}
}"#;

fn relkd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relkd"))
        .args(args)
        .current_dir(dir)
        .env_remove("RELKD_OUT")
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (dir, _) = setup();
    let o = relkd(&["distill", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn broken_config_is_a_usage_error() {
    let (dir, cfg) = setup();
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = relkd(&["--config", cfg.to_str().unwrap(), "gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"train": {"batch_size": 1}}"#).unwrap();
    let o = relkd(&["--config", cfg.to_str().unwrap(), "gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_reports_every_loss() {
    let (dir, _) = setup();
    let o = relkd(&["grad-check", "--seeds", "0,1"], dir.path());
    ok(&o);
    let out = stdout(&o);
    for name in [
        "clip", "fd", "icl", "hrd", "vrd_ce", "vrd_kl", "xrd", "combined",
    ] {
        assert!(
            out.lines()
                .any(|l| l.starts_with(name) && l.contains("max_rel_error")),
            "{name} missing:\n{out}"
        );
    }
}

#[test]
fn gen_data_writes_a_tagged_dataset_and_manifest() {
    let (dir, cfg) = setup();
    let o = relkd(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "data",
            "--seed",
            "3",
            "gen-data",
        ],
        dir.path(),
    );
    ok(&o);
    let ds = std::fs::read_to_string(dir.path().join("data/dataset.jsonl")).unwrap();
    assert_eq!(ds.lines().count(), 240);
    assert!(ds.contains(r#""split":"val""#));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn out_env_var_sets_the_output_root() {
    let (dir, cfg) = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_relkd"))
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .current_dir(dir.path())
        .env("RELKD_OUT", "from-env")
        .output()
        .unwrap();
    ok(&o);
    assert!(dir.path().join("from-env/dataset.jsonl").exists());
}

#[test]
fn distill_then_eval_agree_and_analyze_is_idempotent() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&relkd(
        &["--config", c, "--out", "run", "distill"],
        dir.path(),
    ));
    let run = dir.path().join("run");
    for f in [
        "teacher.json",
        "student.json",
        "metrics.csv",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("run_id,method,seed,epoch,loss_task,loss_fd"));
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    let last: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(last[1], "RD");

    let o = relkd(
        &[
            "--config",
            c,
            "--out",
            "run",
            "eval",
            "--checkpoint",
            "run/student.json",
        ],
        dir.path(),
    );
    ok(&o);
    for line in stdout(&o).lines() {
        let mut parts = line.split_whitespace();
        let (key, value) = (parts.next().unwrap(), parts.next().unwrap());
        let col = header.iter().position(|h| *h == key).unwrap();
        assert_eq!(last[col], value, "{key}");
    }

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&relkd(
            &[
                "--config",
                c,
                "--out",
                out.to_str().unwrap(),
                "analyze",
                "--checkpoint",
                "run/student.json",
            ],
            dir.path(),
        ));
    }
    for f in ["histogram.csv", "stats.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let hist = std::fs::read_to_string(a.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 51);
}

#[test]
fn repeated_distill_runs_write_identical_metrics() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&relkd(
        &["--config", c, "--seed", "5", "--out", "x", "distill"],
        dir.path(),
    ));
    ok(&relkd(
        &["--config", c, "--seed", "5", "--out", "y", "distill"],
        dir.path(),
    ));
    assert_eq!(
        std::fs::read(dir.path().join("x/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("y/metrics.csv")).unwrap()
    );
}

#[test]
fn distill_accepts_a_pretrained_teacher() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&relkd(
        &["--config", c, "--out", "t", "train-teacher"],
        dir.path(),
    ));
    let metrics = std::fs::read_to_string(dir.path().join("t/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(1).unwrap().contains(",TEACHER,"));
    ok(&relkd(
        &[
            "--config",
            c,
            "--out",
            "s",
            "distill",
            "--teacher",
            "t/teacher.json",
        ],
        dir.path(),
    ));
    assert_eq!(
        std::fs::read(dir.path().join("t/teacher.json")).unwrap(),
        std::fs::read(dir.path().join("s/teacher.json")).unwrap()
    );
    let o = relkd(
        &[
            "--config",
            c,
            "--out",
            "s2",
            "distill",
            "--teacher",
            "s/student.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_prints_four_rows_in_order() {
    let (dir, cfg) = setup();
    let o = relkd(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "ab",
            "ablate",
            "--seeds",
            "0,1",
        ],
        dir.path(),
    );
    ok(&o);
    let table = std::fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let methods: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(methods, ["KD", "KD+XRD", "KD+VRD", "RD"]);
    let printed = stdout(&o);
    let rows: Vec<&str> = printed
        .lines()
        .filter(|l| l.trim_start().starts_with("KD") || l.trim_start().starts_with("RD"))
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(dir.path().join("ab/seed-1/rd-s1/metrics.csv").exists());
}
