mod common;

use emfrec::corpus::{split_temporal, DataSplit, Domain};
use emfrec::model::{Model, ModelConfig};
use emfrec::trainer::{train, train_with, StopMetric, TrainConfig};
use emfrec::Error;

fn setup(valid: f64) -> (Model, DataSplit) {
    let cat = common::catalog(8, 8);
    let seqs = common::random_sequences(&cat, 24, 7, 4);
    let split = split_temporal(&seqs, &cat, valid, 0.2).unwrap();
    let cfg = ModelConfig {
        q: 6,
        e: 5,
        max_len: 8,
        ..Default::default()
    };
    (common::model(cfg, &cat, 1), split)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 5,
        epochs,
        patience: epochs.max(1),
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn frozen_matrices_survive_training_bit_for_bit() {
    let (model, split) = setup(0.2);
    let img = model.e_img().to_bytes();
    let tex = model.e_tex().to_bytes();
    let out = train(model, &split, &quick(10)).unwrap();
    assert_eq!(out.model.e_img().to_bytes(), img);
    assert_eq!(out.model.e_tex().to_bytes(), tex);
    assert!(out.model.e_img().frozen() && out.model.e_tex().frozen());
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let (model, split) = setup(0.2);
    let before = model.to_checkpoint_bytes();
    let out = train(model, &split, &quick(0)).unwrap();
    assert_eq!(out.model.to_checkpoint_bytes(), before);
    assert!(out.history.records.is_empty());
    assert_eq!(out.history.best_epoch, None);
}

#[test]
fn identical_runs_are_identical() {
    let run = || {
        let (model, split) = setup(0.2);
        let out = train(model, &split, &quick(3)).unwrap();
        (out.model.to_checkpoint_bytes(), out.history.to_tsv())
    };
    assert_eq!(run(), run());
}

#[test]
fn seeds_change_the_outcome() {
    let (model, split) = setup(0.2);
    let a = train(model.clone(), &split, &quick(2)).unwrap().model.to_checkpoint_bytes();
    let b = train(model, &split, &TrainConfig { seed: 18, ..quick(2) }).unwrap().model.to_checkpoint_bytes();
    assert_ne!(a, b);
}

#[test]
fn best_epoch_parameters_are_returned() {
    let (model, split) = setup(0.25);
    let mut snapshots = Vec::new();
    let cfg = TrainConfig { patience: 2, ..quick(8) };
    let out = train_with(model, &split, &cfg, |r| snapshots.push(r.valid_mrr)).unwrap();
    let best = out.history.best_epoch.unwrap();
    let top = snapshots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(snapshots[best], top);
    assert_eq!(snapshots.iter().position(|&m| m == top), Some(best));
    let rescored = emfrec::evaluator::evaluate(&out.model, &split.valid, Domain::X, &[]).unwrap();
    assert!((rescored.mrr - top).abs() < 1e-12);
}

#[test]
fn loss_stop_metric_records_validation_loss() {
    let (model, split) = setup(0.25);
    let cfg = TrainConfig { stop_metric: StopMetric::Loss, ..quick(2) };
    let out = train(model, &split, &cfg).unwrap();
    assert!(out.history.records.iter().all(|r| r.valid_loss.is_some()));
}

#[test]
fn empty_validation_falls_back_to_training_loss() {
    let (model, split) = setup(0.0);
    assert!(split.valid.is_empty());
    let out = train(model, &split, &quick(3)).unwrap();
    assert!(out.history.records.iter().all(|r| r.valid_mrr.is_nan()));
    let best = out.history.best_epoch.unwrap();
    let min = out.history.records.iter().map(|r| r.loss_total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.history.records[best].loss_total, min);
}

#[test]
fn training_loss_decreases_on_a_learnable_corpus() {
    let (model, split) = setup(0.2);
    let out = train(model, &split, &quick(15)).unwrap();
    let r = &out.history.records;
    assert!(r.last().unwrap().loss_total < r[0].loss_total);
    assert!(r.iter().all(|e| e.audit.violations == 0 && e.audit.rows > 0));
}

#[test]
fn bad_inputs_are_rejected() {
    let (model, mut split) = setup(0.2);
    assert!(matches!(
        train(model.clone(), &split, &TrainConfig { learning_rate: 0.0, ..quick(1) }),
        Err(Error::Config(_))
    ));
    split.train.clear();
    assert!(matches!(train(model, &split, &quick(1)), Err(Error::Split(_))));
}

#[test]
fn checkpoint_mismatches_name_the_tensor() {
    let (model, _) = setup(0.2);
    let bytes = model.to_checkpoint_bytes();
    let bigger = common::catalog(9, 8);
    let img = common::frozen(emfrec::embedstore::Modality::Image, &bigger, 5, 1);
    let tex = common::frozen(emfrec::embedstore::Modality::Text, &bigger, 5, 2);
    let err = Model::from_checkpoint_bytes(&bytes, &bigger, img, tex).unwrap_err();
    assert!(err.to_string().contains("e_id"), "{err}");

    let cat = common::catalog(8, 8);
    let truncated = &bytes[..bytes.len() - 3];
    assert!(Model::from_checkpoint_bytes(truncated, &cat, model.e_img().clone(), model.e_tex().clone()).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Model::from_checkpoint_bytes(&extra, &cat, model.e_img().clone(), model.e_tex().clone()).is_err());
}
