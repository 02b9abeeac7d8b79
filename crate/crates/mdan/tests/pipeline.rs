//! End-to-end integration through the public API: generate a shifted domain
//! pair, train a desk-scale model, evaluate, checkpoint and resume.

use mdan::backbone::{BackboneConfig, EncoderKind};
use mdan::data::{make_synthetic_pair_with, ShiftSpec, SyntheticSpec, Task};
use mdan::trainer::{
    checkpoint, evaluate, resume, train_mdan, ExperimentConfig, Scenario, TrainState,
};

fn desk_setup() -> (
    mdan::data::DomainDataset,
    mdan::data::DomainDataset,
    ExperimentConfig,
) {
    let spec = SyntheticSpec {
        task: Task::Regression,
        num_units: 8,
        min_len: 30,
        max_len: 40,
        channels: 3,
        window: 12,
        step: 4,
        rul_cap: 25.0,
        base_noise: 0.05,
        train_fraction: 0.75,
    };
    let shift = ShiftSpec {
        scale: 2.0,
        offset: 1.0,
        noise_std: 0.08,
    };
    let (source, target) = make_synthetic_pair_with(3, &shift, &spec);
    let config = ExperimentConfig {
        scenario: Scenario {
            source: source.name.clone(),
            target: target.name.clone(),
        },
        epochs: 2,
        batch_size: 16,
        learning_rate: 3e-3,
        rul_cap: 25.0,
        seed: 5,
        deterministic: true,
        backbone: Some(BackboneConfig {
            encoder_kind: EncoderKind::BidirectionalRecurrent,
            num_layers: 1,
            hidden_units: 6,
            predictor_widths: vec![8, 1],
            dropout_rate: 0.1,
            task: Task::Regression,
            num_classes: 1,
            input_channels: 3,
            window: 12,
            conv_layers: Vec::new(),
        }),
        ..ExperimentConfig::default()
    };
    (source, target, config)
}

#[test]
fn train_evaluate_checkpoint_resume_roundtrip() {
    let (source, target, config) = desk_setup();
    let state = train_mdan(&source, &target, &config).unwrap();
    assert_eq!(state.iteration, state.total_iterations(&source, &target));

    let metrics = evaluate(&state.model, &target, false).unwrap();
    assert!(metrics.rmse.is_finite() && metrics.rmse >= 0.0);
    assert!(metrics.score_nasa.is_finite());
    assert_eq!(metrics.n, target.test.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    checkpoint(&state, &path).unwrap();
    let restored = resume(&path).unwrap();
    assert_eq!(restored.iteration, state.iteration);
    assert_eq!(restored.model.params.tensors, state.model.params.tensors);
    assert_eq!(restored.history.len(), state.history.len());
}

#[test]
fn interrupted_training_matches_straight_run() {
    let (source, target, config) = desk_setup();
    let straight = train_mdan(&source, &target, &config).unwrap();

    let mut partial = TrainState::init(&source, &target, &config).unwrap();
    let half = partial.total_iterations(&source, &target) / 2;
    partial.run_until(&source, &target, half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint(&partial, &path).unwrap();
    let mut resumed = resume(&path).unwrap();
    resumed.run(&source, &target).unwrap();

    assert_eq!(resumed.model.params.tensors, straight.model.params.tensors);
    assert_eq!(resumed.history.len(), straight.history.len());
}
