use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trigait::data::read_dataset;
use trigait::eval::parse_tsv;
use trigait::train::{read_log, CHECKPOINT_FILE, LOG_FILE};

fn trigait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trigait"))
        .args(args)
        .env_remove("TRIGAIT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = trigait(args);
    assert!(out.status.success(), "trigait {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|d| {
            let p = d.unwrap().path();
            (p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn small_synth(out: &Path, seed: &str) {
    ok(&["synth", "--out", s(out), "--subjects", "3", "--views", "3", "--frames", "12", "--seed", seed]);
}

const MINI: [&str; 6] = ["--miniature", "--set", "batch_subjects=3", "--set", "checkpoint_interval=5", "--threads"];

#[test]
fn synth_is_byte_identical_per_seed_and_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    small_synth(&a, "3");
    ok(&["synth", "--out", s(&b), "--subjects", "3", "--views", "3", "--frames", "12", "--seed", "3", "--threads", "3"]);
    small_synth(&c, "4");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_defaults_give_110_sequences_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["synth", "--out", s(dir.path()), "--subjects", "4", "--frames", "4"]);
    assert!(out.contains("440 sequences"), "{out}");
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.len(), 440);
    assert_eq!(ds.subjects(), vec![1, 2, 3, 4]);
}

#[test]
fn seed_comes_from_the_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["synth", "--subjects", "2", "--views", "1", "--frames", "3", "--out"];
    let env_run = Command::new(env!("CARGO_BIN_EXE_trigait")).args(args).arg(&a).env("TRIGAIT_SEED", "9").output().unwrap();
    assert!(env_run.status.success());
    ok(&[&args[..], &[s(&b), "--seed", "9"]].concat());
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn bad_input_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let one = trigait(&["synth", "--out", s(&dir.path().join("x")), "--subjects", "1"]);
    assert_eq!(one.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&one.stderr).contains("at least 2 subjects"));

    assert_eq!(trigait(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(trigait(&["check", "--only", "nope"]).status.code(), Some(2));

    let data = dir.path().join("d");
    small_synth(&data, "1");
    let bad = trigait(&[
        "train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--set", "colour=red", "--set", "lr=fast", "--set", "margin=-1",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    for needle in ["colour", "lr = fast", "margin"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    let missing = trigait(&["eval", "--data", s(&data), "--checkpoint", s(&dir.path().join("none.tgck")), "--out", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn config_file_and_list_keys() {
    let dir = tempfile::tempdir().unwrap();
    let keys = ok(&["train", "--data", ".", "--out", ".", "--list-keys"]);
    assert!(keys.lines().any(|l| l.starts_with("partition_mode")));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# bad\ncolour = red\n").unwrap();
    let out = trigait(&["train", "--data", ".", "--out", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.cfg: line 2"));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("r"));
    small_synth(&data, "2");
    let train = |iters: &str, resume: bool| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--iterations", iters];
        args.extend(MINI);
        args.push("1");
        let ck = run.join(CHECKPOINT_FILE);
        if resume {
            args.extend(["--resume", s(&ck)]);
        }
        ok(&args)
    };
    train("10", false);
    let out = train("16", true);
    assert!(out.contains("trained iterations 10..16"), "{out}");
    let log = read_log(&run.join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
    assert!(log.iter().all(|r| r.report.l.is_finite()));
    let again = train("16", true);
    assert!(again.contains("nothing to do"), "{again}");

    let ck = run.join(CHECKPOINT_FILE);
    let eval = dir.path().join("e");
    let ranges = dir.path().join("nested").join("ranges.tsv");
    let printed = ok(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&eval), "--miniature", "--dump-ranges", s(&ranges),
    ]);
    for label in ["NM: ", "BG: ", "CL: ", "Mean: "] {
        assert!(printed.contains(label), "{printed}");
    }
    let report = parse_tsv(&fs::read_to_string(eval.join("report.tsv")).unwrap()).unwrap();
    assert_eq!(report.views, vec![0, 90, 180]);
    assert!(!report.same_view);
    assert!(fs::read_to_string(eval.join("report.md")).unwrap().contains("| Condition | 0° | 90° | 180° | Mean |"));
    // 3 subjects x 3 views x 10 sequences x 7 parts, plus the header.
    assert_eq!(fs::read_to_string(&ranges).unwrap().lines().count(), 90 * 7 + 1);

    // The partition mode is part of the architecture a checkpoint records.
    let mixed = trigait(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&eval), "--miniature", "--partition-mode", "uniform"]);
    assert_eq!(mixed.status.code(), Some(1));
    let run_u = dir.path().join("ru");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run_u), "--iterations", "2", "--partition-mode", "uniform"];
    args.extend(MINI);
    args.push("1");
    ok(&args);
    let uniform = dir.path().join("uniform.tsv");
    let ck_u = run_u.join(CHECKPOINT_FILE);
    ok(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ck_u), "--out", s(&eval), "--miniature", "--partition-mode", "uniform", "--dump-ranges",
        s(&uniform),
    ]);
    assert_ne!(fs::read(&ranges).unwrap(), fs::read(&uniform).unwrap());

    let sanity = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&eval), "--miniature", "--gallery-probes"]);
    assert!(sanity.contains("NM: 100.0"), "{sanity}");

    // A checkpoint from another architecture is refused.
    let foreign = trigait(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&eval)]);
    assert_eq!(foreign.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&foreign.stderr).contains("config hash"));
}
