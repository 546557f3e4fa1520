use rand::{Rng as _, SeedableRng};

use super::*;
use crate::dataset::{Day, Provenance, CHANNELS};
use crate::dsp::WindowTensor;
use crate::rng::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        window_samples: 4,
        dim: 8,
        layers: 1,
        heads: 2,
        head_dim: 4,
        mlp_dim: 8,
        dropout_embed: 0.0,
        dropout_encoder: 0.0,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

/// Windows whose class sets the sign pattern of three channel blocks.
fn toy_set(n: usize, seed: u64, day: Day) -> WindowSet {
    let mut rng = Rng::seed_from_u64(seed);
    let mut set = WindowSet::empty(4);
    for i in 0..n {
        let class = i % 3;
        let data: Vec<f32> = (0..4 * CHANNELS)
            .map(|j| {
                let ch = j % CHANNELS;
                let active = ch / 64 == class;
                let base = if active { 1.0 } else { 0.0 };
                base + rng.gen_range(-0.3f32..0.3)
            })
            .collect();
        let p = Provenance {
            subject: 1,
            gesture: class as u8,
            day,
            repetition: 1 + (i % 6) as u8,
        };
        set.push_window(WindowTensor::from_flat(4, data, p, i as u32).unwrap())
            .unwrap();
    }
    set
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        max_epochs: 15,
        batch_size: 8,
        lr0: 1e-2,
        lr_halving_epochs: vec![10],
        patience: 15,
        seed: 3,
        strategy: Strategy::PretrainedOnAll,
    }
}

#[test]
fn lr_schedule_closed_form() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(1), 1e-3);
    assert_eq!(cfg.lr_at(39), 1e-3);
    assert_eq!(cfg.lr_at(40), 5e-4);
    assert_eq!(cfg.lr_at(79), 5e-4);
    assert_eq!(cfg.lr_at(100), 0.00025);
    for e in 1..=200 {
        let k = [40, 80].iter().filter(|&&t| t <= e).count() as i32;
        assert_eq!(cfg.lr_at(e), 1e-3 * 2f64.powi(-k));
    }
}

#[test]
fn learns_toy_problem_and_logs_schedule() {
    let params = ModelParams::init(tiny(), 1).unwrap();
    let (best, log) = train(params, &toy_set(60, 1, Day::Day1), &toy_set(30, 2, Day::Day1), &quick_cfg()).unwrap();
    assert!(log.best_val_acc > 0.9, "{log:?}");
    assert_eq!(accuracy(&best, &toy_set(30, 2, Day::Day1)).unwrap(), log.best_val_acc);
    let cfg = quick_cfg();
    for e in &log.epochs {
        assert_eq!(e.lr, cfg.lr_at(e.epoch));
    }
    let max = log.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    assert_eq!(max, log.best_val_acc);
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,loss,train_acc,val_acc,lr\n"));
    assert_eq!(csv.lines().count(), log.epochs.len() + 1);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let params = ModelParams::init(
            ModelConfig {
                dropout_embed: 0.1,
                dropout_encoder: 0.5,
                ..tiny()
            },
            4,
        )
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 3,
            ..quick_cfg()
        };
        train(params, &toy_set(30, 1, Day::Day1), &toy_set(12, 2, Day::Day1), &cfg).unwrap()
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn patience_one_with_constant_accuracy_stops_at_two() {
    let mut params = ModelParams::init(tiny(), 2).unwrap();
    for t in params.tensors_mut() {
        t.set_requires_grad(false);
    }
    let cfg = TrainConfig {
        patience: 1,
        ..quick_cfg()
    };
    let (_, log) = train(params, &toy_set(12, 1, Day::Day1), &toy_set(6, 2, Day::Day1), &cfg).unwrap();
    assert_eq!(log.stopped_epoch, 2);
    assert_eq!(log.best_epoch, 1);
    assert_eq!(log.epochs[0].val_acc, log.epochs[1].val_acc);
}

#[test]
fn empty_partition_is_rejected() {
    let params = ModelParams::init(tiny(), 2).unwrap();
    let err = train(params, &WindowSet::empty(4), &toy_set(6, 2, Day::Day1), &quick_cfg()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn invalid_config_lists_problems() {
    let cfg = TrainConfig {
        batch_size: 0,
        patience: 500,
        ..TrainConfig::default()
    };
    match cfg.validate() {
        Err(Error::Config(p)) => assert_eq!(p.len(), 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn strategies_agree_for_one_subject() {
    let subjects = vec![(1u32, toy_set(36, 5, Day::Day1))];
    let plan = SplitPlan::default();
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 2,
        ..quick_cfg()
    };
    let all = pretrain(&subjects, &plan, &tiny(), &cfg).unwrap();
    let ind = pretrain(
        &subjects,
        &plan,
        &tiny(),
        &TrainConfig {
            strategy: Strategy::PretrainedOnIndividuals,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(ind.len(), 1);
    assert_eq!(all[0].params, ind[0].params);
    assert_eq!(all[0].log, ind[0].log);
    assert_eq!(ind[0].subject, Some(1));
}
