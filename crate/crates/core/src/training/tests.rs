use super::*;
use crate::descriptors::{Extractor, ExtractorParams};
use crate::geometry::GeometryConfig;
use crate::io::{generate_pair, MotionKind, SyntheticSpec, TextureKind};

fn model(trainable: bool) -> Model {
    let geometry = GeometryConfig {
        levels: 1,
        range0: 3,
        alpha0: 4,
        beta0: 2,
        gamma0: 1,
        delta0: 4,
        eta0: 1,
    };
    let extractor = if trainable {
        Extractor::Trainable(ExtractorParams::init([3, 4, 6], 5))
    } else {
        Extractor::Fixed
    };
    Model::new(geometry, extractor)
}

fn samples(n: usize, size: usize) -> Vec<PairSample> {
    (0..n as u64)
        .map(|seed| {
            let pair = generate_pair(&SyntheticSpec {
                width: size,
                height: size,
                texture: TextureKind::CheckerNoise,
                motion: MotionKind::Translation {
                    dx: (seed % 3) as i64 - 1,
                    dy: (seed % 2) as i64,
                },
                magnitude: 2.0,
                max_displacement: 3.0,
                seed,
            })
            .unwrap();
            PairSample {
                image0: GrayImage::from(&pair.image0),
                image1: GrayImage::from(&pair.image1),
                flow: pair.flow,
            }
        })
        .collect()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr_exponents: 1e-2,
        lr_descriptor: 1e-2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = model(true);
    let before = m.clone();
    let cfg = TrainConfig {
        lr_exponents: 0.0,
        lr_descriptor: 0.0,
        ..config()
    };
    let mut state = TrainerState::new(&m);
    train(&mut m, &mut state, &samples(3, 16), &[], &cfg, None, &mut |_, _| {}).unwrap();
    assert_eq!(m, before);
    assert_eq!(state.steps_done, 6);
}

#[test]
fn weight_decay_adds_to_value_and_gradient() {
    let m = model(true);
    let data = samples(2, 16);
    let groups = ParamGroups {
        exponents: true,
        descriptor: true,
    };
    let cfg = LossConfig::default();
    let plain = objective(&data, &m, &cfg, 0.0, groups).unwrap();
    let decayed = objective(&data, &m, &cfg, 0.5, groups).unwrap();
    let p = m.extractor.params().unwrap();
    let norm = p.squared_norm() + m.exponents.iter().map(|w| w * w).sum::<f64>();
    assert!((decayed.value - plain.value - 0.25 * norm).abs() < 1e-9);
    let ge = decayed.grad_exponents[0] - plain.grad_exponents[0];
    assert!((ge - 0.5 * m.exponents[0]).abs() < 1e-12);
    let gd = decayed.grad_extractor.unwrap().get_flat(4) - plain.grad_extractor.unwrap().get_flat(4);
    assert!((gd - 0.5 * p.get_flat(4)).abs() < 1e-12);
}

#[test]
fn frozen_groups_stay_fixed() {
    let mut m = model(true);
    let before = m.clone();
    let cfg = TrainConfig {
        groups: ParamGroups {
            exponents: true,
            descriptor: false,
        },
        ..config()
    };
    let mut state = TrainerState::new(&m);
    train(&mut m, &mut state, &samples(2, 16), &[], &cfg, None, &mut |_, _| {}).unwrap();
    assert_eq!(m.extractor, before.extractor);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = samples(3, 16);
    let cfg = config();
    let mut full = model(true);
    let mut full_state = TrainerState::new(&full);
    let mut trace = Vec::new();
    train(&mut full, &mut full_state, &data, &[], &cfg, None, &mut |s, v| trace.push((s, v))).unwrap();

    let mut again = model(true);
    let mut again_state = TrainerState::new(&again);
    let mut trace2 = Vec::new();
    train(&mut again, &mut again_state, &data, &[], &cfg, None, &mut |s, v| trace2.push((s, v))).unwrap();
    assert_eq!(trace, trace2);
    assert_eq!(full, again);

    // Stop after four steps (mid-epoch), checkpoint, and resume.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let mut part = model(true);
    let mut state = TrainerState::new(&part);
    let order = epoch_order(cfg.seed, 0, 3);
    for idx in order {
        train_step(&mut part, &mut state, &data[idx], &cfg).unwrap();
    }
    let order = epoch_order(cfg.seed, 1, 3);
    train_step(&mut part, &mut state, &data[order[0]], &cfg).unwrap();
    state.to_checkpoint(&part).save(&path).unwrap();

    let mut resumed = model(true);
    let mut rstate = TrainerState::from_checkpoint(&Checkpoint::load(&path).unwrap(), &mut resumed).unwrap();
    assert_eq!(rstate.steps_done, 4);
    train(&mut resumed, &mut rstate, &data, &[], &cfg, None, &mut |_, _| {}).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(rstate, full_state);
}

#[test]
fn checkpoint_must_fit_the_model() {
    let m = model(true);
    let ckpt = TrainerState::new(&m).to_checkpoint(&m);
    let mut fixed = model(false);
    assert!(TrainerState::from_checkpoint(&ckpt, &mut fixed).is_err());
}

#[test]
fn epoch_order_is_a_permutation_that_varies() {
    let a = epoch_order(1, 0, 20);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    assert_ne!(a, epoch_order(1, 1, 20));
    assert_eq!(a, epoch_order(1, 0, 20));
}

#[test]
fn identity_estimate_on_static_pairs_is_perfect() {
    let truth = FlowField::constant(10, 8, [0.0, 0.0]);
    let report = evaluate_flows(&[EvalItem {
        estimate: truth.clone(),
        truth,
        match_pixels: vec![[2, 3]],
        matches: 1,
    }])
    .unwrap();
    assert_eq!(report.accuracy, [1.0; 4]);
    assert_eq!(report.epe, Some(0.0));
    assert_eq!(report.coverage, 1.0);
}

#[test]
fn epoch_log_csv() {
    let log = EpochLog {
        epoch: 1,
        step: 20,
        loss: 0.5,
        val_acc2: Some(0.25),
        val_epe: None,
        val_loss: Some(0.125),
    };
    assert_eq!(EpochLog::CSV_HEADER.split(',').count(), log.to_csv().split(',').count());
    assert_eq!(log.to_csv(), "1,20,0.500000,0.250000,,0.125000");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr_exponents: -1.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn decay_only_gradient_when_no_cell_is_scored() {
    let m = model(true);
    let mut data = samples(1, 16);
    data[0].flow = FlowField::invalid(16, 16);
    let groups = ParamGroups {
        exponents: true,
        descriptor: true,
    };
    let obj = objective(&data, &m, &LossConfig::default(), 0.25, groups).unwrap();
    assert_eq!(obj.data_loss, 0.0);
    let p = m.extractor.params().unwrap();
    let g = obj.grad_extractor.unwrap();
    for i in 0..p.len() {
        assert_eq!(g.get_flat(i), 0.25 * p.get_flat(i));
    }
    assert_eq!(obj.grad_exponents[0], 0.25 * m.exponents[0]);
}

#[test]
fn exponent_training_lowers_the_loss_on_one_pair() {
    // Random frozen CNN descriptors leave loss to remove.
    let mut m = model(true);
    let data = samples(1, 24);
    let cfg = TrainConfig {
        lr_exponents: 0.1,
        epochs: 50,
        groups: ParamGroups {
            exponents: true,
            descriptor: false,
        },
        ..config()
    };
    let before = mean_loss(&m, &data, &cfg.loss).unwrap();
    let mut state = TrainerState::new(&m);
    train(&mut m, &mut state, &data, &[], &cfg, None, &mut |_, _| {}).unwrap();
    let after = mean_loss(&m, &data, &cfg.loss).unwrap();
    assert_eq!(state.steps_done, 50);
    assert!(after < before, "{before} -> {after}");
}
