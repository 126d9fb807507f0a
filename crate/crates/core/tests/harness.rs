use agentopt::checkpoint::Checkpoint;
use agentopt::harness::{
    metrics_to_string, run_experiment, train_to_dir, Experiment, ExperimentConfig, MetricsRecord, TrainOptions,
    CHECKPOINT_FILE, METRICS_FILE,
};
use agentopt::nn;
use agentopt::Error;

fn config(optimizer: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
        seed = 3
        [dataset]
        kind = "blobs"
        classes = 3
        dim = 6
        train_size = 96
        test_size = 48
        seed = 1
        [model]
        hidden = [12]
        [optimizer]
        name = "{optimizer}"
        lr = 0.05
        {extra}
        [training]
        epochs = 4
        batch_size = 16
        "#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Everything except the adaptive-weight diagnostics, which only AGENT fills in.
fn trajectory(m: &[MetricsRecord]) -> Vec<(u64, u64, u64, u64, u64)> {
    m.iter()
        .map(|r| {
            (
                r.lr.to_bits(),
                r.train_loss.to_bits(),
                r.test_accuracy.to_bits(),
                r.grad_norm.to_bits(),
                r.weight.to_bits(),
            )
        })
        .collect()
}

#[test]
fn zero_epochs_leaves_initialisation() {
    let mut cfg = config("sgd", "");
    cfg.training.epochs = 0;
    let done = run_experiment(cfg.clone()).unwrap();
    let fresh = Experiment::new(cfg).unwrap();
    assert!(done.metrics().is_empty());
    assert_eq!(done.checkpoint().to_bytes(), fresh.checkpoint().to_bytes());
}

#[test]
fn same_seed_same_bits() {
    for name in ["sgd", "svrg", "agent", "adam", "mvr", "agent+mvr"] {
        let a = run_experiment(config(name, "")).unwrap();
        let b = run_experiment(config(name, "")).unwrap();
        assert_eq!(metrics_to_string(a.metrics()), metrics_to_string(b.metrics()), "{name}");
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes(), "{name}");
        assert!(a.metrics().iter().all(|m| m.train_loss.is_finite()), "{name}");
    }
}

#[test]
fn agent_with_zero_weight_is_sgd() {
    let sgd = run_experiment(config("sgd", "")).unwrap();
    let agent = run_experiment(config("agent", "agent = { fixed_weight = 0.0 }")).unwrap();
    assert_eq!(trajectory(sgd.metrics()), trajectory(agent.metrics()));
    assert_eq!(sgd.params(), agent.params());
}

#[test]
fn agent_with_unit_weight_is_svrg() {
    let svrg = run_experiment(config("svrg", "")).unwrap();
    let agent = run_experiment(config("agent", "agent = { fixed_weight = 1.0 }")).unwrap();
    assert_eq!(trajectory(svrg.metrics()), trajectory(agent.metrics()));
    assert_eq!(svrg.params(), agent.params());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let extra = "[sparsity]\ntarget_sparsity = 0.8\nrule = \"set\"\n[objective]\nkind = \"at\"\n[attack]\nepsilon = 0.05\niterations = 2";
    let cfg = config("agent", extra);
    let whole = tempfile::tempdir().unwrap();
    let parts = tempfile::tempdir().unwrap();
    train_to_dir(cfg.clone(), whole.path(), &TrainOptions::default()).unwrap();
    let first = train_to_dir(cfg.clone(), parts.path(), &TrainOptions { resume: false, stop_after: Some(2) }).unwrap();
    assert_eq!(first.epochs_completed(), 2);
    train_to_dir(cfg, parts.path(), &TrainOptions { resume: true, stop_after: None }).unwrap();
    for file in [METRICS_FILE, CHECKPOINT_FILE] {
        let a = std::fs::read(whole.path().join(file)).unwrap();
        let b = std::fs::read(parts.path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let exp = run_experiment(config("adam", "[sparsity]\ntarget_sparsity = 0.5\nrule = \"rigl\"")).unwrap();
    let bytes = exp.checkpoint().to_bytes();
    let back = Experiment::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.checkpoint().to_bytes(), bytes);
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    train_to_dir(config("sgd", ""), dir.path(), &TrainOptions { resume: false, stop_after: Some(1) }).unwrap();
    let other = config("agent", "");
    assert!(train_to_dir(other, dir.path(), &TrainOptions { resume: true, stop_after: None }).is_err());
}

#[test]
fn divergence_is_recorded_as_fault() {
    let mut cfg = config("sgd", "momentum = 0.0\nweight_decay = 0.0");
    cfg.optimizer.lr = 1e300;
    let exp = run_experiment(cfg).unwrap();
    let last = exp.metrics().last().unwrap();
    assert!(last.fault.is_some(), "{:?}", exp.metrics());
    assert!(exp.metrics().len() <= 4);
}

#[test]
fn invalid_config_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut cfg = config("sgd", "");
    cfg.training.batch_size = 0;
    match train_to_dir(cfg, &out, &TrainOptions::default()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "training.batch_size"),
        other => panic!("{other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn pruned_weights_stay_zero_and_training_learns() {
    let cfg = config("agent", "[sparsity]\ntarget_sparsity = 0.7\nrule = \"set\"");
    let mut exp = Experiment::new(cfg).unwrap();
    let initial = nn::accuracy(exp.params(), exp.test_data());
    exp.run(None, |e, _| {
        for (p, m) in e.params().iter().zip(e.mask().as_params().iter()) {
            for (&x, &k) in p.value.data().iter().zip(m.value.data()) {
                assert!(k == 1.0 || x == 0.0);
            }
        }
        Ok(())
    })
    .unwrap();
    assert!(exp.metrics().iter().all(|m| (m.sparsity - 0.7).abs() < 0.02));
    assert!(exp.metrics().last().unwrap().test_accuracy > initial);
}
