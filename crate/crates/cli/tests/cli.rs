use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn r2g2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2g2")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn verify_default_is_green() {
    let dir = tempfile::tempdir().unwrap();
    let out = r2g2(&["verify", "--config", "default", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    assert!(!stdout(&out).contains("FAIL"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let checks = json["checks"].as_array().unwrap();
    assert!(checks.len() >= 20);
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn missing_config_exits_3_and_names_path() {
    let out = r2g2(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/definitely/not/here.toml"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "stepz = 10\n");
    let out = r2g2(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("stepz"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(r2g2(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(r2g2(&["train", "--estimator", "vi"]).status.code(), Some(2));
    assert_eq!(r2g2(&[]).status.code(), Some(2));
}

#[test]
fn help_documents_every_key() {
    let out = r2g2(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for key in [
        "estimator", "seeds", "steps", "lr", "model.widths", "site.m", "site.n", "cg.tol", "dataset.kind",
        "dataset.n", "out.dir",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn equivalence_prints_max_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let out = r2g2(&["equivalence", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("max LRT/R2-G2 deviation:")).unwrap();
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value <= 1e-9, "{line}");
}

#[test]
fn failing_check_exits_1() {
    // Too few draws for the biased mutant to be detected.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "samples = 50\n");
    let out = r2g2(&["verify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL unbiased_mutant_detected"));
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cg.max_iters = 1\n");
    let out = r2g2(&["verify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("non-convergence"));
}

#[test]
fn identical_invocations_write_identical_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(
        root.path(),
        "seeds = [4, 5]\nsteps = 60\nestimator = [\"rt\", \"lrt\", \"r2g2\"]\n[dataset]\nkind = \"xor_rings\"\n",
    );
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out_dir = root.path().join(name);
        for sub in ["train", "variance"] {
            let out = r2g2(&[sub, "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
            assert!(out.status.success(), "{sub}: {}", stderr(&out));
        }
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        listings.push(files);
    }
    assert!(listings[0].iter().any(|(n, _)| n.starts_with("train_")));
    assert!(listings[0].iter().any(|(n, _)| n.starts_with("variance_")));
    assert_eq!(listings[0], listings[1]);
}

#[test]
fn overrides_replace_seed_and_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 20\nseeds = [1, 2, 3]\n");
    let out = r2g2(&["train", "--config", &cfg, "--seed", "9", "--estimator", "lrt", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csvs: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs, ["train_lrt_seed9.csv"]);
}

