use std::path::Path;
use std::process::Command;

fn sfb(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sfb")).args(args).current_dir(cwd).env_remove("SFB_DATA_DIR").output().unwrap()
}

const TINY: &str = r#"
name = "tiny"
seeds = [0, 1]
out_dir = "out"
methods = ["erm", "irm", "sfb-no-adapt", "sfb", "pl-naive", "gt-adapt", "oracle"]

[dataset]
generator = "ac"
train = [0.95, 0.7]
validation = 0.6
test = 0.1
n_train = 500
n_validation = 200
n_test = 200

[train]
lr = 0.01
steps = 600
pretrain_steps = 100
hidden = [8, 8]
trunk_width = 8
dim_s = 4

[search]
lambda_s = [1000.0]
lambda_c = [1.0]

[adaptation]
learner = "logistic"
features = "head_logits"
lr = 0.1
max_steps = 5

[sweep]
values = [0.1, 0.9]
"#;

#[test]
fn invalid_penalty_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), TINY.replace("dim_s = 4", "dim_s = 2\npenalty = \"l1\"")).unwrap();
    let out = sfb(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.penalty"));
}

#[test]
fn missing_mnist_fails_in_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cmnist.toml");
    let out = sfb(&["generate", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate"), "{err}");
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
}

#[test]
fn staged_commands_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for cmd in ["generate", "train", "adapt", "evaluate"] {
        let out = sfb(&[cmd, "--config", "tiny.toml", "--seed", "0"], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    for f in [
        "data/seed_0/train_e0.csv",
        "data/seed_0/validation.csv",
        "data/seed_0/test.csv",
        "models/seed_0.json",
        "metrics/seed_0.csv",
        "adapted/seed_0.json",
        "calibration/seed_0.json",
        "evaluation/seed_0.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics/seed_0.csv")).unwrap();
    assert!(metrics.starts_with("step,risk_e0,risk_e1,"));
    assert_eq!(metrics.lines().count(), 601);
}

#[test]
fn run_then_report_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = sfb(&["run", "--config", "tiny.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    for m in ["ERM", "IRM", "SFB-no-adapt", "SFB", "PL-naive", "GT-adapt", "Oracle"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{m} "))), "{m} missing:\n{report}");
    }
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 7);

    let again = sfb(&["report", "--config", "tiny.toml"], dir.path());
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap(), report);

    let out = sfb(&["sweep", "--config", "tiny.toml", "--seed", "0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert!(sweep.lines().any(|l| l.starts_with("Bayes,")));
}
