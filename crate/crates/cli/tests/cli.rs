use std::path::Path;
use std::process::{Command, Output};

fn agentopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentopt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, optimizer: &str, extra: &str) -> String {
    let text = format!(
        r#"seed = 5
[dataset]
kind = "blobs"
classes = 3
dim = 5
train_size = 90
test_size = 45
seed = 2

[model]
hidden = [10]

[optimizer]
name = "{optimizer}"
lr = 0.05

[sparsity]
target_sparsity = 0.5

[training]
epochs = 3
batch_size = 15
{extra}
"#
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_the_three_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "agent", "");
    for out in ["a", "b"] {
        let o = agentopt(&["train", "--config", &cfg, "--out", dir.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("epoch 3:"));
    }
    for file in ["metrics.csv", "checkpoint.bin", "summary.json"] {
        assert!(dir.path().join("a").join(file).is_file());
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stop_and_resume_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "svrg", "");
    let whole = dir.path().join("whole");
    let parts = dir.path().join("parts");
    assert!(agentopt(&["train", "--config", &cfg, "--out", whole.to_str().unwrap()]).status.success());
    assert!(agentopt(&["train", "--config", &cfg, "--out", parts.to_str().unwrap(), "--stop-after", "1"])
        .status
        .success());
    assert!(agentopt(&["train", "--config", &cfg, "--out", parts.to_str().unwrap(), "--resume"]).status.success());
    assert_eq!(std::fs::read(whole.join("metrics.csv")).unwrap(), std::fs::read(parts.join("metrics.csv")).unwrap());
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "bad.toml", "agent", "lr_schedule = { breakpoints = [2, 1], factors = [0.1, 0.1] }");
    let o = agentopt(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.lr_schedule.breakpoints"));
    assert!(!dir.path().join("x").exists());

    let cfg = write_config(dir.path(), "typo.toml", "agent", "epoch = 3");
    let o = agentopt(&["train", "--config", &cfg, "--out", dir.path().join("y").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
}

#[test]
fn diagnose_attack_eval_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let sgd = write_config(dir.path(), "sgd.toml", "sgd", "");
    let agent = write_config(dir.path(), "agent.toml", "agent", "");
    let (a, b) = (dir.path().join("sgd"), dir.path().join("agent"));
    assert!(agentopt(&["train", "--config", &sgd, "--out", a.to_str().unwrap()]).status.success());
    assert!(agentopt(&["train", "--config", &agent, "--out", b.to_str().unwrap()]).status.success());

    let ck = a.join("checkpoint.bin");
    let csv = dir.path().join("diag.csv");
    let o = agentopt(&[
        "diagnose",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--measure",
        "correlation",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);

    let o = agentopt(&[
        "attack-eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--eps",
        "0.03",
        "--iters",
        "5",
        "--restarts",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert!(line.starts_with("clean/robust accuracy (%): "));
    let nums: Vec<f64> = line.trim().rsplit(' ').next().unwrap().split('/').map(|s| s.parse().unwrap()).collect();
    assert!(nums[1] <= nums[0]);

    let out = dir.path().join("cmp");
    let o = agentopt(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epochs to reach test_accuracy"));
    assert!(out.join("budgets.csv").is_file() && out.join("thresholds.csv").is_file());
}

#[test]
fn compare_refuses_different_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", "sgd", "");
    let b_text = std::fs::read_to_string(&a).unwrap().replace("seed = 2", "seed = 9");
    std::fs::write(dir.path().join("b.toml"), b_text).unwrap();
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    assert!(agentopt(&["train", "--config", &a, "--out", ra.to_str().unwrap()]).status.success());
    let b = dir.path().join("b.toml");
    assert!(agentopt(&["train", "--config", b.to_str().unwrap(), "--out", rb.to_str().unwrap()]).status.success());
    let o = agentopt(&["compare", ra.to_str().unwrap(), rb.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different datasets"));
}
