use csts_core::data::checkpoint::Checkpoint;
use csts_core::gradsuite::random_batch;
use csts_core::model::ContrastVariant;
use csts_core::train::{ablate, train, AblationCell, StepRecord, TrainConfig};
use csts_core::{CstsError, ModelConfig, Sample};

fn data(n: usize, seed: u64) -> Vec<Sample> {
    random_batch(&ModelConfig::desk(), n, seed).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 2, lr: 1e-3, seed, ..Default::default() }
}

fn csts() -> ModelConfig {
    ModelConfig::desk().with_experiment("csts").unwrap()
}

#[test]
fn logged_total_is_kld_plus_weighted_contrast() {
    let (tr, te) = (data(4, 1), data(2, 2));
    let out = train(&quick(0), &csts(), &tr, &te, None).unwrap();
    assert_eq!(out.log.len(), 2);
    for r in &out.log {
        let c = r.cntr.expect("csts logs the contrastive term");
        assert!((r.total - (r.kld + 0.05 * c)).abs() < 1e-9, "{r:?}");
    }
    // first step runs at the base rate of the cosine schedule
    assert_eq!(out.log[0].lr, 1e-3);
}

#[test]
fn contrastive_weight_changes_the_trajectory() {
    let tr = data(4, 1);
    let a = train(&TrainConfig { alpha: 0.0, ..quick(0) }, &csts(), &tr, &[], None).unwrap();
    let b = train(&TrainConfig { alpha: 0.05, ..quick(0) }, &csts(), &tr, &[], None).unwrap();
    let differs = a.store.iter().zip(b.store.iter()).any(|((_, _, x), (_, _, y))| x != y);
    assert!(differs);
    // the first step saw identical weights, so the KLD agrees there
    assert_eq!(a.log[0].kld, b.log[0].kld);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (tr, te) = (data(4, 1), data(2, 2));
    let run = || {
        let mut log = Vec::new();
        let out = train(&quick(5), &csts(), &tr, &te, Some(&mut log)).unwrap();
        let ckpt = Checkpoint::new(&out.model.cfg, &out.store, Some(&out.optimizer)).unwrap().to_bytes().unwrap();
        (log, ckpt, out.evals)
    };
    let (la, ca, ea) = run();
    let (lb, cb, eb) = run();
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    assert_eq!(ea, eb);
    let lines: Vec<StepRecord> =
        String::from_utf8(la).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    // a different seed moves the weights
    let other = train(&quick(6), &csts(), &tr, &te, None).unwrap();
    assert_ne!(Checkpoint::new(&other.model.cfg, &other.store, None).unwrap().to_bytes().unwrap(), {
        let out = train(&quick(5), &csts(), &tr, &te, None).unwrap();
        Checkpoint::new(&out.model.cfg, &out.store, None).unwrap().to_bytes().unwrap()
    });
}

#[test]
fn divergence_aborts_with_the_step() {
    let tr = data(6, 1);
    let cfg = TrainConfig { lr: 1e200, weight_decay: 0.0, ..quick(0) };
    match train(&cfg, &csts(), &tr, &[], None) {
        Err(CstsError::State(msg)) => assert!(msg.contains("step 1") || msg.contains("step 2"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e200 did not diverge"),
    }
}

#[test]
fn grid_of_one_is_a_single_row() {
    let (tr, te) = (data(2, 1), data(2, 2));
    let cells = [AblationCell { experiment: "vision-only".into(), seed: 0 }];
    let table = ablate(&cells, &quick(0), &ModelConfig::desk(), &tr, &te, |_| {});
    assert_eq!(table.rows.len(), 1);
    assert!(table.rows[0].f1.is_some() && table.rows[0].error.is_none());
    assert_eq!(table.to_csv().lines().count(), 2);
}

#[test]
fn failing_cell_is_recorded_and_grid_continues() {
    let (tr, te) = (data(2, 1), data(2, 2));
    let cells = [
        AblationCell { experiment: "no-such-model".into(), seed: 0 },
        AblationCell { experiment: "sts".into(), seed: 0 },
    ];
    let mut seen = 0;
    let table = ablate(&cells, &quick(0), &ModelConfig::desk(), &tr, &te, |_| seen += 1);
    assert_eq!(seen, 2);
    assert!(table.rows[0].error.as_deref().unwrap().contains("no-such-model"));
    assert!(table.rows[1].f1.is_some());
    assert_eq!(table.mean_f1().len(), 1);
}

#[test]
fn every_contrastive_variant_trains() {
    let tr = data(2, 1);
    for v in [ContrastVariant::Vanilla, ContrastVariant::Spatial, ContrastVariant::Temporal, ContrastVariant::Cross, ContrastVariant::Post] {
        let cfg = TrainConfig { contrast: Some(v), max_steps: Some(1), ..quick(0) };
        let out = train(&cfg, &ModelConfig::desk().with_experiment("sts").unwrap(), &tr, &[], None).unwrap();
        let r = &out.log[0];
        assert!(r.cntr.is_some_and(f64::is_finite), "{v:?}: {r:?}");
    }
}

#[test]
fn max_steps_stops_early_and_still_evaluates() {
    let (tr, te) = (data(6, 1), data(2, 2));
    let cfg = TrainConfig { epochs: 3, max_steps: Some(2), ..quick(0) };
    let out = train(&cfg, &ModelConfig::desk(), &tr, &te, None).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.evals.len(), 1);
}

#[test]
fn config_json_rejects_unknown_fields() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "lr": 0.01}"#).unwrap();
    assert_eq!((cfg.epochs, cfg.lr, cfg.batch_size), (3, 0.01, 8));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
}
