//! Optimizer steps, schedule, determinism, checkpoints and resume.

use pefnet::checkpoint::Checkpoint;
use pefnet::data::{collate, synth_dataset, AugmentationPolicy, SegmentationSample};
use pefnet::metrics::LossConfig;
use pefnet::optim::{cosine_lr, AdamConfig, ScheduleConfig};
use pefnet::train::{self, train_step, OutputDir, TrainConfig, TrainState, LAST_CHECKPOINT, METRICS_FILE};
use pefnet::{Error, Model, ModelConfig, Preset};
use proptest::prelude::*;

const SIZE: usize = 32;

fn data(n: usize, seed: u64) -> Vec<SegmentationSample> {
    synth_dataset(n, SIZE, seed).unwrap()
}

fn fresh(seed: u64) -> TrainState {
    TrainState::new(
        Model::build(ModelConfig::preset(Preset::Toy), seed).unwrap(),
        AdamConfig::default(),
    )
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        augment: AugmentationPolicy {
            seed,
            ..AugmentationPolicy::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn a_tiny_step_lowers_the_loss_on_a_frozen_batch() {
    for seed in 0..10 {
        let samples = data(4, seed);
        let (x, y) = collate(&samples.iter().collect::<Vec<_>>()).unwrap();
        let mut state = fresh(seed);
        let loss_cfg = LossConfig::default();
        let before = train_step(&mut state, &x, &y, 1e-6, &loss_cfg).unwrap();
        // lr 0 leaves the weights alone and reports the loss at the new point
        let after = train_step(&mut state.clone(), &x, &y, 0.0, &loss_cfg).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn one_epoch_of_eight_samples_in_batches_of_four_is_two_steps() {
    let mut state = fresh(0);
    let logs = train::train(&mut state, &data(8, 0), &[], &config(1, 0), None, |_| {}).unwrap();
    assert_eq!(state.step(), 2);
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].step, 2);
    assert_eq!(state.epoch, 1);
}

fn run_to_dir(dir: &std::path::Path, cfg: &TrainConfig, state: &mut TrainState) -> Vec<train::EpochLog> {
    let out = OutputDir {
        root: dir.to_path_buf(),
        img_size: SIZE,
    };
    let all = data(10, 5);
    train::train(state, &all[..8], &all[8..], cfg, Some(&out), |_| {}).unwrap()
}

#[test]
fn fixed_seed_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(2, 11);
    run_to_dir(a.path(), &cfg, &mut fresh(11));
    run_to_dir(b.path(), &cfg, &mut fresh(11));
    let csv_a = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv_a, std::fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 3);
    assert_eq!(
        std::fs::read(a.path().join(LAST_CHECKPOINT)).unwrap(),
        std::fs::read(b.path().join(LAST_CHECKPOINT)).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = fresh(2);
    run_to_dir(dir.path(), &config(1, 2), &mut state);
    let path = dir.path().join(LAST_CHECKPOINT);
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step(), state.step());

    let (x, _) = collate(&data(2, 9).iter().collect::<Vec<_>>()).unwrap();
    let before = state.model.logits(&x).unwrap();
    let after = loaded.model.logits(&x).unwrap();
    assert!(before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let resaved = dir.path().join("again.ckpt");
    loaded.save(&resaved).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&resaved).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(3, 4);
    let mut a = fresh(4);
    run_to_dir(full.path(), &cfg, &mut a);

    let mut first = cfg.clone();
    first.max_epochs_this_run = Some(1);
    run_to_dir(split.path(), &first, &mut fresh(4));
    let mut b = TrainState::from_checkpoint(Checkpoint::load(&split.path().join(LAST_CHECKPOINT)).unwrap());
    assert_eq!(b.epoch, 1);
    run_to_dir(split.path(), &cfg, &mut b);

    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(full.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(split.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn non_finite_weights_abort_with_a_diagnostic() {
    let mut state = fresh(0);
    let (_, w) = state.model.params.iter_mut().next().unwrap();
    w.data_mut()[0] = f32::NAN;
    let err = train::train(&mut state, &data(4, 0), &[], &config(1, 0), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    let msg = err.to_string();
    assert!(
        msg.contains("epoch 1") && msg.contains("batch 0") && msg.contains("lr"),
        "{msg}"
    );
}

#[test]
fn adam_hand_example_and_zero_gradient() {
    let mut p = pefnet::ParameterStore::from_parts(
        [("w".to_string(), pefnet::Tensor::new(&[1], vec![0.0f32]).unwrap())]
            .into_iter()
            .collect(),
        Default::default(),
    );
    let mut state = pefnet::optim::OptimState::new(&p, AdamConfig::default());
    let zero = [("w".to_string(), pefnet::Tensor::new(&[1], vec![0.0f32]).unwrap())]
        .into_iter()
        .collect();
    state.update(&mut p, &zero, 0.1).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[0.0]);

    let mut state = pefnet::optim::OptimState::new(&p, AdamConfig::default());
    let one = [("w".to_string(), pefnet::Tensor::new(&[1], vec![1.0f32]).unwrap())]
        .into_iter()
        .collect();
    state.update(&mut p, &one, 0.1).unwrap();
    let want = -0.1 / (1.0 + 1e-8);
    assert!((f64::from(p.get("w").unwrap().data()[0]) - want).abs() < 1e-7);
}

proptest! {
    #[test]
    fn cosine_schedule_is_monotone_and_hits_both_ends(total in 1u64..500, lr_max in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let cfg = ScheduleConfig { lr_max, eta_min: lr_max * frac, total_steps: total };
        prop_assert_eq!(cosine_lr(0, &cfg), lr_max);
        prop_assert!((cosine_lr(total, &cfg) - cfg.eta_min).abs() <= 1e-15 * lr_max);
        prop_assert_eq!(cosine_lr(total + 7, &cfg), cosine_lr(total, &cfg));
        for t in 0..total {
            prop_assert!(cosine_lr(t + 1, &cfg) <= cosine_lr(t, &cfg));
        }
        if total % 2 == 0 {
            prop_assert!((cosine_lr(total / 2, &cfg) - (lr_max + cfg.eta_min) / 2.0).abs() < 1e-12);
        }
    }
}
