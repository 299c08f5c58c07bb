mod common;

use common::*;
use wfci_sleep::compute::{AdamConfig, AdamState, Tensor};
use wfci_sleep::dataset::{Epoch, SleepState, SplitMode, SplitSpec};
use wfci_sleep::eval::MetricsReport;
use wfci_sleep::model::{read_checkpoint, write_checkpoint, ArchConfig, ModelParams};
use wfci_sleep::train::*;
use wfci_sleep::Error;

const T: usize = 3;

fn arch() -> ArchConfig {
    ArchConfig {
        channels: 4,
        lstm_hidden: 4,
        n_conv_blocks: 2,
        convs_per_block: 1,
        input_hw: [16, 16],
        frames_per_epoch: T,
        ..ArchConfig::tiny()
    }
}

/// Noise plus a bright square whose position encodes the class.
fn separable(n: usize, seed: u64) -> Vec<Epoch> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let s = SleepState::ALL[i % 3];
            let mut x = randn(&[T, 1, 16, 16], &mut r).map(|v| 0.3 * v);
            let (r0, c0) = [(2, 2), (2, 10), (10, 6)][s.index()];
            for t in 0..T {
                for dr in 0..4 {
                    for dc in 0..4 {
                        let v = x.at(&[t, 0, r0 + dr, c0 + dc]);
                        x.set(&[t, 0, r0 + dr, c0 + dc], v + 2.0);
                    }
                }
            }
            Epoch {
                frames: x.cast(),
                label: Some(s),
                recording_id: format!("rec{}", i % 6),
                epoch_index: i / 6,
                duration_s: T as f64 / 16.8,
                frame_rate_hz: 16.8,
            }
        })
        .collect()
}

fn refs(e: &[Epoch]) -> Vec<&Epoch> {
    e.iter().collect()
}

fn small_cfg(lr: f64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 4,
        max_epochs,
        early_stop_patience: 100,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = separable(12, 1);
    let p = ModelParams::<f32>::init(arch(), 3).unwrap();
    let out = train(p.clone(), &refs(&data[..9]), &refs(&data[9..]), &small_cfg(0.0, 1)).unwrap();
    assert_eq!(write_checkpoint(&out.best).unwrap(), write_checkpoint(&p).unwrap());
}

#[test]
fn single_epoch_overfits() {
    let data = separable(1, 2);
    let mut p = ModelParams::<f32>::init(arch(), 4).unwrap();
    let cfg = small_cfg(1e-2, 1);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        p.tensors(),
    );
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = train_step(&mut p, &mut adam, &[&data[0]], &cfg).unwrap();
    }
    let probs: Vec<f64> = p.forward(&data[0].frames).unwrap().probs.iter().map(|&v| v as f64).collect();
    let final_loss = wfci_sleep::compute::focal_loss(&probs, data[0].label.unwrap().index(), &cfg.focal()).unwrap();
    assert!(loss < 1e-2 && final_loss < 1e-3, "loss {loss} then {final_loss}");
}

#[test]
fn fixed_batch_loss_decreases_over_first_steps() {
    let data = separable(6, 5);
    let batch = refs(&data);
    let cfg = small_cfg(1e-3, 1);
    let seeds = 20;
    let mut monotone = 0;
    for seed in 0..seeds {
        let mut p = ModelParams::<f32>::init(arch(), seed).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            p.tensors(),
        );
        let losses: Vec<f64> = (0..6).map(|_| train_step(&mut p, &mut adam, &batch, &cfg).unwrap()).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone * 100 >= 95 * seeds as usize, "{monotone}/{seeds} seeds decreased monotonically");
}

#[test]
fn training_is_deterministic() {
    let data = separable(24, 6);
    let split = SplitSpec {
        fractions: [0.5, 0.25, 0.25],
        seed: 1,
        mode: SplitMode::EpochShuffle,
    };
    let cfg = small_cfg(3e-3, 3);
    let a = run_experiment(&data, &split, &arch(), &cfg).unwrap();
    let b = run_experiment(&data, &split, &arch(), &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.test_report, b.test_report);
    assert_eq!(write_checkpoint(&a.params).unwrap(), write_checkpoint(&b.params).unwrap());
    assert_eq!(a.log.rows.len(), 3);
    // The best row carries the highest validation kappa.
    let best = a.log.best().unwrap();
    assert!(a.log.rows.iter().all(|r| r.val_kappa <= best.val_kappa));
}

#[test]
fn separable_data_is_learned_and_checkpoint_restores_metrics() {
    let data = separable(60, 7);
    let split = SplitSpec {
        fractions: [0.6, 0.2, 0.2],
        seed: 2,
        mode: SplitMode::EpochShuffle,
    };
    let cfg = small_cfg(1e-2, 30);
    let exp = run_experiment(&data, &split, &arch(), &cfg).unwrap();
    assert!(exp.test_report.kappa.value > 0.8, "{}", exp.test_report.summary());
    assert!(exp.log.rows.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));

    let restored = read_checkpoint(&write_checkpoint(&exp.params).unwrap()).unwrap();
    let val: Vec<&Epoch> = exp.split.val.iter().map(|&i| &data[i]).collect();
    assert_eq!(evaluate_split(&restored, &val, 5).unwrap(), exp.val_report);
    // Evaluation does not depend on the batch size.
    assert_eq!(evaluate_split(&restored, &val, 1).unwrap(), exp.val_report);
}

#[test]
fn early_stopping_and_checkpoint_dir() {
    let data = separable(12, 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        early_stop_patience: 1,
        checkpoint_dir: Some(dir.path().join("ck")),
        ..small_cfg(0.0, 10)
    };
    let p = ModelParams::<f32>::init(arch(), 0).unwrap();
    let out = train(p, &refs(&data[..8]), &refs(&data[8..]), &cfg).unwrap();
    // With lr 0 nothing improves after the first epoch.
    assert_eq!(out.log.rows.len(), 2);
    assert_eq!(out.best_epoch, Some(0));
    assert!(dir.path().join("ck/best.sscn").exists());
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let mut data = separable(8, 9);
    data[0].frames.data_mut()[0] = f32::NAN;
    let p = ModelParams::<f32>::init(arch(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..small_cfg(1e-3, 1)
    };
    match train(p, &refs(&data[..6]), &refs(&data[6..]), &cfg) {
        Err(Error::Numeric(m)) => assert!(m.contains("batch 0") && m.contains("conv0"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_configs_and_data_are_rejected() {
    let data = separable(6, 10);
    let p = ModelParams::<f32>::init(arch(), 0).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(p.clone(), &refs(&data), &refs(&data), &bad), Err(Error::Config { .. })));
    assert!(train(p.clone(), &refs(&data), &[], &TrainConfig::default()).is_err());
    let mut unl = data.clone();
    unl[2].label = None;
    assert!(matches!(train(p, &refs(&unl), &refs(&data), &TrainConfig::default()), Err(Error::Data(_))));
}

#[test]
fn evaluation_reference_values() {
    // An all-Wake predictor on the published class histogram.
    let mut truth = vec![SleepState::Wake; 12_674];
    truth.extend(vec![SleepState::Nrem; 5_701]);
    truth.extend(vec![SleepState::Rem; 780]);
    let r = MetricsReport::from_labels(&truth, &vec![SleepState::Wake; truth.len()]).unwrap();
    assert!((r.metrics.accuracy - 12_674.0 / 19_155.0).abs() < 1e-12);
    assert!((r.metrics.accuracy - 0.6616).abs() < 1e-4);
    assert_eq!(MetricsReport::from_labels(&truth, &truth).unwrap().kappa.value, 1.0);

    let mut g = rng(11);
    let bal: Vec<SleepState> = (0..1000).map(|i| SleepState::ALL[i % 3]).collect();
    let rnd = random_labels(1000, &mut g);
    assert!(MetricsReport::from_labels(&bal, &rnd).unwrap().kappa.value.abs() < 0.1);
}

#[test]
fn input_scale_is_inverse_rms_of_nonzero_pixels() {
    let mk = |v: Vec<f32>| Epoch {
        frames: Tensor::new(&[1, 1, 2, 2], v).unwrap(),
        label: None,
        recording_id: "r".into(),
        epoch_index: 0,
        duration_s: 1.0,
        frame_rate_hz: 1.0,
    };
    let e = [mk(vec![0.0, 3.0, 0.0, 4.0]), mk(vec![0.0; 4])];
    let want = 1.0 / (12.5f64).sqrt();
    assert!((fit_input_scale(e.iter()) - want).abs() < 1e-12);
    assert_eq!(fit_input_scale(e[1..].iter()), 1.0);
}
