use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]

[dataset]
n_train = 200
n_test = 100
n_validation = 100

[attacks]
kinds = ["direct", "ksa"]
r_grid = [0.0, 0.1]

[defense]
variants = ["none"]

[curves]
labeled_counts = [50, 100]
r_values = [0.1]

[timing]
ks = [5, 10]
repeats = 1
"#;

fn glcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glcert")).args(args).output().unwrap()
}

fn run(dir: &Path, cmd: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(out);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    glcert(&args)
}

/// Every file of `dir` except the timing sidecars, sorted by name.
fn deterministic_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_str().unwrap().ends_with("_timing.csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn curves_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let a = run(dir.path(), "curves", "a", &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = deterministic_files(&out);
    assert!(first.iter().any(|(n, _)| n == "curves_runs.csv"));
    assert!(first.iter().any(|(n, _)| n.ends_with(".svg")));
    assert!(out.join("curves_runs_timing.csv").exists());
    fs::remove_dir_all(&out).unwrap();
    let b = run(dir.path(), "curves", "a", &[]);
    assert!(b.status.success());
    assert!(first == deterministic_files(&out), "rerun output differs");
}

#[test]
fn label_sweep_and_timing_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["label-sweep", "timing"] {
        let o = run(dir.path(), cmd, cmd, &[]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(fs::read_dir(dir.path().join(cmd)).unwrap().count() > 1);
    }
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "gen-data", "d", &[]);
    assert!(o.status.success());
    for (name, rows) in [("train.csv", 200), ("test.csv", 100), ("validation.csv", 100)] {
        let text = fs::read_to_string(dir.path().join("d").join(name)).unwrap();
        assert_eq!(text.lines().count(), rows + 1, "{name}");
    }
}

#[test]
fn attack_and_prune_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "attack", "x", &["--kind", "ksa", "--r", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("GL accuracy clean"));
    assert!(dir.path().join("x/attack_ksa.csv").exists());

    let o = run(dir.path(), "prune", "p", &["--a", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("p/pruned.csv").exists());
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = [0]\n[dataset]\nn_train = \"many\"\n").unwrap();
    let out = dir.path().join("o");
    let o = glcert(&["curves", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());

    let o = glcert(&["curves", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());

    let o = run(dir.path(), "attack", "x", &["--kind", "nonsense", "--r", "0.1"]);
    assert!(!o.status.success());

    let o = run(dir.path(), "attack", "x", &["--kind", "direct", "--r", "-1"]);
    assert!(!o.status.success());
}
