mod common;

use std::fs;

use edgeblur::error::Error;
use edgeblur::trainer::{train, Checkpoint, ConfigSources, Stage, TrainConfig, Trainer};

fn cfg(stage: Stage, extra: &[&str]) -> TrainConfig {
    let ov: Vec<String> = [
        "crop=16",
        "num_scales=2",
        "critic_layers=2",
        "critic_width=4",
        "edge_width=4",
        "deblur_width=4",
        "res_blocks=1",
        "feature_layer=conv2_2",
        "dc_window=3",
    ]
    .iter()
    .chain(extra)
    .map(|s| s.to_string())
    .collect();
    TrainConfig::resolve(&ConfigSources {
        overrides: &ov,
        stage: Some(stage),
        ..Default::default()
    })
    .unwrap()
}

fn edge_checkpoint(dir: &std::path::Path) -> String {
    let pairs = common::synthetic_pairs(2, 16, 3);
    let mut t = Trainer::new(cfg(Stage::Edge, &["max_steps=2", "epochs=5"])).unwrap();
    let s = train(&mut t, &pairs, dir).unwrap();
    s.final_checkpoint().to_string_lossy().into_owned()
}

#[test]
fn steps_touch_only_their_own_network() {
    let pairs = common::synthetic_pairs(1, 16, 1);
    for stage in [Stage::Edge, Stage::Deblur] {
        let mut t = Trainer::new(cfg(stage, &["use_edge=false"])).unwrap();
        let mut b = t.prepare_batch(&pairs).unwrap();
        let (g0, c0) = (t.generator_params().content_hash(), t.critic_params().content_hash());
        t.critic_step(&mut b).unwrap();
        assert_eq!(t.generator_params().content_hash(), g0);
        let c1 = t.critic_params().content_hash();
        assert_ne!(c1, c0);
        t.generator_step(&mut b).unwrap();
        assert_eq!(t.critic_params().content_hash(), c1);
        assert_ne!(t.generator_params().content_hash(), g0);
    }
}

#[test]
fn edge_network_stays_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let ck_path = edge_checkpoint(&dir.path().join("edge"));
    let edge = Checkpoint::load(ck_path.as_ref()).unwrap().generator.params;
    let pairs = common::synthetic_pairs(3, 16, 4);
    let key = format!("edge_checkpoint={ck_path}");
    let mut t = Trainer::new(cfg(Stage::Deblur, &[&key, "epochs=2"])).unwrap();
    let s = train(&mut t, &pairs, &dir.path().join("deblur")).unwrap();
    assert_eq!(t.edge_params().unwrap().content_hash(), edge.content_hash());
    let saved = Checkpoint::load(s.final_checkpoint()).unwrap();
    assert_eq!(saved.edge.unwrap().params.content_hash(), edge.content_hash());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let pairs = common::synthetic_pairs(1, 16, 2);
    let mut t = Trainer::new(cfg(Stage::Deblur, &["use_edge=false", "lr_initial=0", "lr_final=0"])).unwrap();
    let (g0, c0) = (t.generator_params().clone(), t.critic_params().clone());
    for _ in 0..2 {
        let mut b = t.prepare_batch(&pairs).unwrap();
        t.cycle(&mut b).unwrap();
    }
    assert_eq!(t.generator_params(), &g0);
    assert_eq!(t.critic_params(), &c0);
}

#[test]
fn critic_loss_falls_on_a_fixed_batch() {
    let pairs = common::synthetic_pairs(1, 32, 5);
    let mut t = Trainer::new(cfg(Stage::Deblur, &["use_edge=false", "crop=32", "seed=0"])).unwrap();
    let mut b = t.prepare_batch(&pairs).unwrap();
    // the objective is evaluated at fixed interpolation weights between steps
    let eps = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut losses = vec![t.critic_objective(&mut b, &eps).unwrap()];
    for _ in 0..50 {
        t.critic_step(&mut b).unwrap();
        losses.push(t.critic_objective(&mut b, &eps).unwrap());
    }
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down >= 45, "critic loss fell in {down} of 50 steps: {losses:?}");
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(2, 16, 6);
    let mut t = Trainer::new(cfg(Stage::Deblur, &["use_edge=false", "epochs=0"])).unwrap();
    let s = train(&mut t, &pairs, dir.path()).unwrap();
    assert_eq!(s.checkpoints.len(), 1);
    assert!(s.final_checkpoint().ends_with("epoch-0000"));
    assert_eq!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 1);
    assert_eq!(s.counters.generator_steps, 0);
}

#[test]
fn empty_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg(Stage::Edge, &[])).unwrap();
    let err = train(&mut t, &Vec::new(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn divergence_saves_a_crash_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(2, 16, 7);
    let mut t = Trainer::new(cfg(Stage::Deblur, &["use_edge=false", "lr_initial=1e30", "lr_final=1e30", "epochs=50"])).unwrap();
    let err = train(&mut t, &pairs, dir.path()).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
    let crash = Checkpoint::load(&dir.path().join("crash")).unwrap();
    assert!(crash.generator.params.all_finite());
    assert!(crash.critic.params.all_finite());
}

#[test]
fn resumed_run_matches_uninterrupted_run_mid_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(4, 16, 8);
    let base = cfg(Stage::Deblur, &["use_edge=false", "epochs=2", "seed=5"]);

    let mut full = Trainer::new(base.clone()).unwrap();
    let full_summary = train(&mut full, &pairs, &dir.path().join("full")).unwrap();

    let mut first = Trainer::new(base.clone()).unwrap();
    first.extend_run(2, 3, 0);
    let s = train(&mut first, &pairs, &dir.path().join("part")).unwrap();
    assert!(s.final_checkpoint().ends_with("epoch-0000-step-0000003"));
    let ck = Checkpoint::load(s.final_checkpoint()).unwrap();
    let fe = edgeblur::nets::FeatureExtractor::from_env(ck.config.feature_layer().unwrap()).unwrap();
    let mut second = Trainer::from_checkpoint(ck, fe).unwrap();
    second.extend_run(2, 0, 0);
    let s2 = train(&mut second, &pairs, &dir.path().join("part")).unwrap();
    assert_eq!(s2.counters, full_summary.counters);
    assert_eq!(second.generator_params(), full.generator_params());
    assert_eq!(second.critic_params(), full.critic_params());
    assert_eq!(s2.last_reports, full_summary.last_reports);
}
