use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankchoice"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn generate(cwd: &Path) {
    let out = run(
        cwd,
        &[
            "generate",
            "--out",
            "data",
            "--agents",
            "120",
            "--alternatives",
            "6",
            "--schools",
            "3",
            "--program-types",
            "2",
            "--seed",
            "3",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_fit_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    generate(cwd);
    let fit = run(
        cwd,
        &[
            "fit",
            "--data",
            "data/train",
            "--model",
            "linear",
            "--strata",
            "2",
            "--max-epochs",
            "15",
            "--step-size",
            "0.05",
            "--out",
            "model",
        ],
    );
    assert!(
        fit.status.success(),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    for f in ["params.json", "trace.csv", "summary.json"] {
        assert!(cwd.join("model").join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(cwd.join("model/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,objective"));

    let eval = run(
        cwd,
        &[
            "evaluate",
            "--params",
            "model/params.json",
            "--data",
            "data/test",
            "--samples",
            "5",
            "--max-k",
            "3",
            "--out",
            "eval",
        ],
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let metrics = fs::read_to_string(cwd.join("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 5);
    assert!(metrics.contains("accuracy"));
}

#[test]
fn parse_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["fit", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["no-such-verb"]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    generate(cwd);
    fs::write(cwd.join("bad.toml"), "[train]\nnot_a_field = 1\n").unwrap();
    let bad_config = run(
        cwd,
        &[
            "fit",
            "--data",
            "data/train",
            "--config",
            "bad.toml",
            "--out",
            "m",
        ],
    );
    assert_eq!(bad_config.status.code(), Some(3));

    let too_many_alternatives = run(
        cwd,
        &[
            "equiv-check",
            "--sizes",
            "9",
            "--trials",
            "1",
            "--out",
            "e.json",
        ],
    );
    assert_eq!(too_many_alternatives.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    generate(cwd);
    let out = run(
        cwd,
        &[
            "fit",
            "--data",
            "data/train",
            "--model",
            "nested",
            "--strata",
            "1",
            "--step-size",
            "1e8",
            "--max-epochs",
            "20",
            "--out",
            "m",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit", "--data", "nowhere", "--out", "m"]);
    assert_eq!(out.status.code(), Some(4));
}
