use supercm_cli::config::{parse_seeds, DataSource, ExperimentConfig, Task};
use supercm_core::data::SyntheticKind;

#[test]
fn empty_text_is_the_default_blobs_ssl_config() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.task, Task::Ssl);
    assert_eq!(cfg.data.source, DataSource::Synthetic(SyntheticKind::Blobs));
    assert_eq!(cfg.weights.beta, 0.18);
    assert_eq!(cfg.iterations(), 2000);
}

#[test]
fn text_round_trip_preserves_config_and_hash() {
    let cfg = ExperimentConfig::parse("task = uda\nloss.beta = 0.5\nmodel.layers = 2,8,4\nseeds = 3..6\n").unwrap();
    let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.iterations(), cfg.iterations());
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn hash_ignores_key_order_seeds_and_output_dir() {
    let a = ExperimentConfig::parse("loss.beta = 0.3\noptim.lr = 0.01\nseeds = 0..3\n").unwrap();
    let b = ExperimentConfig::parse("optim.lr = 0.01\n# comment\n\nloss.beta = 0.3\noutput_dir = elsewhere\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = ExperimentConfig::parse("loss.beta = 0.31\noptim.lr = 0.01\n").unwrap();
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn task_selects_loss_weight_and_data_defaults() {
    let uda = ExperimentConfig::parse("task = uda").unwrap();
    assert_eq!((uda.weights.beta, uda.weights.delta), (0.9, 1.0));
    assert_eq!(uda.data.source, DataSource::Synthetic(SyntheticKind::TwoMoons));
    assert_eq!(uda.data.classes, 2);
    // Same when the task arrives as an override after the defaults.
    let via_override = ExperimentConfig::default().with_overrides(&["task=uda"]).unwrap();
    assert_eq!(via_override, uda);
    // Explicit settings survive a task switch.
    let kept = ExperimentConfig::default().with_overrides(&["loss.beta=0", "task=uda"]).unwrap();
    assert_eq!((kept.weights.beta, kept.weights.delta), (0.0, 1.0));
}

#[test]
fn malformed_configs_are_rejected() {
    assert!(ExperimentConfig::parse("loss.beta = 1\nloss.beta = 2\n").is_err());
    assert!(ExperimentConfig::parse("no_such.key = 1").is_err());
    assert!(ExperimentConfig::parse("loss.beta").is_err());
    assert!(ExperimentConfig::parse("loss.beta = abc").is_err());
    assert!(ExperimentConfig::default().with_overrides(&["optim.kind=rmsprop"]).is_err());
}

#[test]
fn validation_checks_dimensions_and_files() {
    let bad = ExperimentConfig::parse("model.layers = 3,8").unwrap();
    assert!(bad.validate().is_err());
    let missing = ExperimentConfig::parse("data.source = idx\ndata.train_images = /nonexistent").unwrap();
    assert!(missing.validate().is_err());
    assert!(ExperimentConfig::default().validate().is_ok());
}

#[test]
fn seed_lists_parse() {
    assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
    assert_eq!(parse_seeds("4,2,9").unwrap(), vec![4, 2, 9]);
    assert_eq!(parse_seeds("7").unwrap(), vec![7]);
    assert!(parse_seeds("x").is_err());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["blobs_ssl.cfg", "moons_uda.cfg", "mnist.cfg", "mnist_full.cfg"] {
        let cfg = ExperimentConfig::load(root.join(name)).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        if cfg.data.source != DataSource::Idx {
            cfg.validate().unwrap();
        }
    }
}
