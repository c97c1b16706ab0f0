use std::path::Path;
use std::process::{Command, Output};

fn ppotd(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppotd"));
    cmd.args(args).env_remove("SEED");
    if let Some(s) = seed {
        cmd.env("SEED", s);
    }
    cmd.output().expect("spawn ppotd")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(&path, "# short run\niterations = 12\nwarmup_steps = 3\nseed = 4\n").unwrap();
    path
}

#[test]
fn train_is_deterministic_and_seed_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let o = ppotd(&["train", "--config", s(&cfg), "--out", s(&out)], seed);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(out.join("loss.csv")).unwrap(),
            std::fs::read(out.join("model.ckpt")).unwrap(),
            out,
        )
    };
    let a = run("a", None);
    let b = run("b", None);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(String::from_utf8_lossy(&a.0).lines().count(), 13);

    let c = run("c", Some("9"));
    assert_ne!(a.1, c.1);
    let saved = std::fs::read_to_string(c.2.join("config.txt")).unwrap();
    assert!(saved.lines().any(|l| l.replace(' ', "") == "seed=9"), "{saved}");
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "iterations = 5\nlearnin_rate = 0.1\n").unwrap();
    let o = ppotd(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learnin_rate"));
}

#[test]
fn invalid_seed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = ppotd(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))], Some("abc"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_writes_report_curves_and_phrase_masks_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(ppotd(&["train", "--config", s(&cfg), "--out", s(&run)], None).status.success());
    let out = dir.path().join("eval");
    let o = ppotd(
        &[
            "eval",
            "--ckpt",
            s(&run.join("model.ckpt")),
            "--config",
            s(&cfg),
            "--scenes",
            "3",
            "--out",
            s(&out),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for split in ["overall", "things", "stuff", "singulars"] {
        assert!(report.contains(split), "{report}");
    }
    assert!(out.join("curve_overall.csv").exists());
    assert!(out.join("curve_overall.svg").exists());
    let masks: Vec<String> = std::fs::read_dir(out.join("masks"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(!masks.is_empty());
    assert!(masks.iter().all(|m| m.contains("_phrase") && m.ends_with(".pgm")), "{masks:?}");

    let svg = dir.path().join("loss.svg");
    let o = ppotd(&["plot", "--csv", s(&run.join("loss.csv")), "--out", s(&svg)], None);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let curve_svg = dir.path().join("curve.svg");
    assert!(
        ppotd(&["plot", "--csv", s(&out.join("curve_overall.csv")), "--out", s(&curve_svg)], None)
            .status
            .success()
    );
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(ppotd(&["train", "--config", s(&cfg), "--out", s(&run)], None).status.success());
    let wide = dir.path().join("wide.cfg");
    std::fs::write(&wide, "hidden_dim = 48\n").unwrap();
    let o = ppotd(
        &[
            "eval",
            "--ckpt",
            s(&run.join("model.ckpt")),
            "--config",
            s(&wide),
            "--scenes",
            "2",
            "--out",
            s(&dir.path().join("e")),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_and_selftest_pass() {
    let o = ppotd(&["gradcheck"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = ppotd(&["selftest"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn corrupted_gradient_fails_and_names_the_op() {
    let o = ppotd(&["gradcheck", "--corrupt", "gelu"], None);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let failed: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{stdout}");
    assert!(failed[0].starts_with("gelu,"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gelu"));

    assert_eq!(ppotd(&["gradcheck", "--corrupt", "nonsense"], None).status.code(), Some(2));
}
