mod common;

use common::*;
use sha2::{Digest, Sha256};
use wfci_sleep::dataset::{Epoch, SleepState};
use wfci_sleep::interpret::*;
use wfci_sleep::model::{write_checkpoint, ArchConfig, ModelParams};

fn arch(t: usize) -> ArchConfig {
    ArchConfig {
        channels: 4,
        lstm_hidden: 4,
        n_conv_blocks: 2,
        input_hw: [16, 16],
        frames_per_epoch: t,
        ..ArchConfig::tiny()
    }
}

fn epoch(t: usize, seed: u64) -> Epoch {
    Epoch {
        frames: randn(&[t, 1, 16, 16], &mut rng(seed)).cast(),
        label: Some(SleepState::Nrem),
        recording_id: "r".into(),
        epoch_index: 3,
        duration_s: t as f64 / 16.8,
        frame_rate_hz: 16.8,
    }
}

fn params_hash(p: &ModelParams<f32>) -> Vec<u8> {
    Sha256::digest(write_checkpoint(p).unwrap()).to_vec()
}

#[test]
fn single_pixel_toy_puts_all_mass_on_the_pixel() {
    // One channel, 3x3 map, logit equal to the activation at (1, 2).
    let mut acts = vec![0.0; 9];
    acts[5] = 2.0;
    let mut grads = vec![0.0; 9];
    grads[5] = 1.0;
    let m = cam_from_activations(&acts, &grads, 1, 1, 9);
    let total: f64 = m[0].iter().sum();
    assert!(total > 0.0);
    assert_eq!(m[0][5], total);
}

#[test]
fn frame_without_gradient_has_empty_map() {
    let mut r = rng(1);
    let acts = randn(&[2, 3, 4], &mut r).data().to_vec();
    let mut grads = randn(&[2, 3, 4], &mut r).data().to_vec();
    grads[12..].iter_mut().for_each(|g| *g = 0.0);
    let m = cam_from_activations(&acts, &grads, 2, 3, 4);
    assert!(m[1].iter().all(|&v| v == 0.0));
    assert!(m.iter().flatten().all(|&v| v >= 0.0));
}

#[test]
fn saliency_is_normalized() {
    let p = ModelParams::<f32>::init(arch(3), 2).unwrap();
    for s in SleepState::ALL {
        let m = grad_cam(&p, &epoch(3, 4).frames, s).unwrap();
        assert_eq!(m.map.len(), 16 * 16);
        assert_eq!(m.frames.len(), 3);
        assert!(m.frames.iter().flatten().all(|&v| v >= 0.0));
        assert!(m.map.iter().all(|v| (0.0..=1.0).contains(v)));
        if m.zero {
            assert!(m.map.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(m.map.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }
}

#[test]
fn saliency_ignores_a_common_logit_shift() {
    let p = ModelParams::<f32>::init(arch(4), 5).unwrap();
    let mut shifted = p.clone();
    shifted.dense_b.data_mut().iter_mut().for_each(|b| *b += 3.0);
    let e = epoch(4, 6);
    for s in SleepState::ALL {
        let a = grad_cam(&p, &e.frames, s).unwrap();
        let b = grad_cam(&shifted, &e.frames, s).unwrap();
        for (x, y) in a.frames.iter().flatten().zip(b.frames.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn top_decile_mass_counts_the_rectangle() {
    let mut map = vec![0.0; 100];
    for r in 0..10 {
        for c in 0..10 {
            map[r * 10 + c] = if r < 5 && c < 5 { 1.0 } else { 0.01 * (r + c) as f64 };
        }
    }
    let m = SaliencyMap {
        target: SleepState::Wake,
        h: 10,
        w: 10,
        frames: Vec::new(),
        map,
        zero: false,
    };
    assert_eq!(top_decile_mass_in(&m, 0..5, 0..5), 1.0);
    assert_eq!(top_decile_mass_in(&m, 5..10, 5..10), 0.0);
}

#[test]
fn bilinear_upsampling_preserves_constants_and_corners() {
    let up = upsample_bilinear(&[2.5; 4], 2, 2, 8, 8);
    assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    let up = upsample_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
    assert_eq!((up[0], up[15]), (0.0, 3.0));
}

#[test]
fn attention_sums_to_one_and_leaves_params_alone() {
    let p = ModelParams::<f32>::init(arch(6), 7).unwrap();
    let before = params_hash(&p);
    for seed in 0..5 {
        let tr = extract_attention(&p, &epoch(6, seed)).unwrap();
        assert_eq!(tr.alpha.len(), 6);
        assert!((tr.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(tr.entropy() <= (6f64).ln() + 1e-9);
        // Windows longer than the training epoch are accepted.
        let long = extract_attention(&p, &epoch(12, seed)).unwrap();
        assert!((long.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    grad_cam(&p, &epoch(6, 9).frames, SleepState::Rem).unwrap();
    assert_eq!(params_hash(&p), before);
    let one = extract_attention(&ModelParams::<f32>::init(arch(1), 0).unwrap(), &epoch(1, 0)).unwrap();
    assert_eq!(one.alpha, vec![1.0]);
}

#[test]
fn entropy_reference_values() {
    assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    assert!((entropy(&[0.25; 4]) - (4f64).ln()).abs() < 1e-15);
}

#[test]
fn attention_aggregation_and_export() {
    let mk = |pred: SleepState, alpha: Vec<f64>| AttentionTrace {
        recording_id: "r".into(),
        epoch_index: 0,
        label: None,
        predicted: pred,
        duration_s: 20.0,
        alpha,
    };
    let traces = vec![
        mk(SleepState::Wake, vec![0.5, 0.5]),
        mk(SleepState::Wake, vec![0.7, 0.3]),
        mk(SleepState::Rem, vec![1.0, 0.0]),
    ];
    let s = aggregate_attention(&traces).unwrap();
    assert_eq!(s.iter().map(|x| (x.state, x.n)).collect::<Vec<_>>(), [(SleepState::Wake, 2), (SleepState::Rem, 1)]);
    assert!((s[0].mean[0] - 0.6).abs() < 1e-12 && (s[0].sd[0] - 0.1).abs() < 1e-12);
    assert_eq!(s[1].mean_entropy, 0.0);
    assert!(aggregate_attention(&[mk(SleepState::Wake, vec![1.0]), mk(SleepState::Wake, vec![0.5, 0.5])]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    write_attention_csv(&path, &traces).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.starts_with("recording_id,epoch_index,predicted,timestep,weight\nr,0,W,0,0.500000000\n"));
}

#[test]
fn saliency_export_writes_png_and_raw_grid() {
    let p = ModelParams::<f32>::init(arch(2), 3).unwrap();
    let m = grad_cam(&p, &epoch(2, 1).frames, SleepState::Wake).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_saliency(dir.path(), "e0", &m).unwrap();
    let raw = std::fs::read(dir.path().join("e0.f32")).unwrap();
    assert_eq!(raw.len(), 4 * 16 * 16);
    let back: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    assert!(back.iter().zip(&m.map).all(|(a, b)| *a == *b as f32));
    assert!(dir.path().join("e0.png").exists());
}
