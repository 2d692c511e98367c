use std::fs;
use std::path::Path;
use std::process::Command;

use gradmask_cli::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradmask"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(run(["gradmask", "gen-data", "--out", s(d), "--count", "10", "--seed", "1"]), 0);
    }
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 11);
    assert_eq!(da, db);
}

#[test]
fn eval_of_identical_sets_scores_zero_fid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("models");
    assert_eq!(run(["gradmask", "gen-data", "--out", s(&data), "--count", "20", "--seed", "4"]), 0);
    assert_eq!(
        run([
            "gradmask", "train-eval", "--data", s(&data), "--out", s(&models), "--epochs", "1", "--batch-size", "10",
        ]),
        0
    );
    let out = tmp.path().join("eval");
    assert_eq!(
        run([
            "gradmask",
            "eval",
            "--generated",
            s(&data),
            "--real",
            s(&data),
            "--classifier",
            s(&models.join("classifier.gmdf")),
            "--dual",
            s(&models.join("dual.gmdf")),
            "--out",
            s(&out),
        ]),
        0
    );
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    let fids: Vec<f64> = report
        .lines()
        .filter(|l| l.split('\t').nth(1) == Some("fid"))
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(fids.len(), 5);
    assert!(fids.iter().all(|f| f.abs() < 1e-8), "{report}");
}

#[test]
fn failures_are_one_line_and_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--generated", "nowhere", "--real", "nowhere", "--classifier", "x", "--dual", "y"])
        .args(["--out", s(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "{err}");

    let out = bin().args(["gen-data", "--out", s(tmp.path()), "--bogus"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn wrong_checkpoint_kind_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("models");
    assert_eq!(run(["gradmask", "gen-data", "--out", s(&data), "--count", "10"]), 0);
    assert_eq!(
        run(["gradmask", "train-eval", "--data", s(&data), "--out", s(&models), "--epochs", "1"]),
        0
    );
    let out = bin()
        .args(["generate", "--ckpt", s(&models.join("classifier.gmdf"))])
        .args(["--ref", s(&data.join("img_00000.png")), "--prompt", "a red circle in forest"])
        .args(["--out", s(&tmp.path().join("gen"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest mismatch") && err.contains("ldm"), "{err}");
}

#[test]
fn config_file_keys_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "count = 3\nshininess = 2\n").unwrap();
    let out = bin()
        .args(["gen-data", "--out", s(&tmp.path().join("d")), "--config", s(&cfg)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("'shininess'"));

    fs::write(&cfg, "# small set\ncount = 3\nseed = 8\n").unwrap();
    let d = tmp.path().join("ok");
    assert_eq!(run(["gradmask", "gen-data", "--out", s(&d), "--config", s(&cfg), "--count", "4"]), 0);
    let manifest = fs::read_to_string(d.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
}
