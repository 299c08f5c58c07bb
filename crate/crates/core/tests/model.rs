mod common;

use common::*;
use rand::Rng;
use wfci_sleep::compute::gradcheck::check_gradients_at;
use wfci_sleep::compute::{Graph, Padding, Tensor};
use wfci_sleep::model::{
    argmax_lower_tie, read_checkpoint, write_checkpoint, ArchConfig, ModelParams, ParamVars, MAGIC,
};
use wfci_sleep::Error;

fn small_arch(t: usize) -> ArchConfig {
    ArchConfig {
        channels: 4,
        lstm_hidden: 4,
        input_hw: [32, 32],
        frames_per_epoch: t,
        ..ArchConfig::default()
    }
}

fn random_epoch(t: usize, seed: u64) -> Tensor<f64> {
    randn(&[t, 1, 32, 32], &mut rng(seed))
}

fn randomize_biases(p: &mut ModelParams<f64>, seed: u64) {
    let mut r = rng(seed);
    for c in &mut p.convs {
        c.bias = randn(c.bias.shape(), &mut r).map(|v| 0.1 * v);
    }
}

#[test]
fn time_reversal_changes_output() {
    let mut differing = 0;
    for trial in 0..100u64 {
        let mut p = ModelParams::<f64>::init(small_arch(6), trial).unwrap();
        randomize_biases(&mut p, 1000 + trial);
        let e = random_epoch(6, 2000 + trial);
        let mut rev = e.clone();
        for t in 0..6 {
            rev.outer_mut(t).copy_from_slice(e.outer(5 - t));
        }
        let (a, b) = (p.forward(&e).unwrap(), p.forward(&rev).unwrap());
        if a.probs.iter().zip(&b.probs).any(|(x, y)| (x - y).abs() > 1e-12) {
            differing += 1;
        }
    }
    assert!(differing >= 95, "only {differing}/100 reversed epochs changed the output");
}

#[test]
fn outputs_are_distributions() {
    for seed in 0..5 {
        let p = ModelParams::<f64>::init(small_arch(5), seed).unwrap();
        let out = p.forward(&random_epoch(5, seed).map(|v| 50.0 * v)).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(out.probs.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((out.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(out.alpha.len(), 5);
    }
}

#[test]
fn single_frame_epoch_runs() {
    let p = ModelParams::<f32>::init(small_arch(1), 3).unwrap();
    let out = p.forward(&random_epoch(1, 3).cast()).unwrap();
    assert_eq!(out.alpha, vec![1.0]);
    assert!((out.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn wrong_frame_count_is_rejected() {
    let p = ModelParams::<f32>::init(small_arch(4), 0).unwrap();
    assert!(matches!(p.forward(&random_epoch(3, 0).cast()), Err(Error::Dimension(_))));
    assert!(p.forward_any_len(&random_epoch(3, 0).cast()).is_ok());
}

#[test]
fn identical_frames_share_features() {
    let mut p = ModelParams::<f64>::init(small_arch(4), 7).unwrap();
    randomize_biases(&mut p, 8);
    let frame = randn(&[1, 32, 32], &mut rng(9));
    let mut e = Tensor::zeros(&[4, 1, 32, 32]);
    for t in 0..4 {
        e.outer_mut(t).copy_from_slice(frame.data());
    }
    let mut g = Graph::new();
    let vars = p.register(&mut g, false);
    let out = p.forward_graph(&mut g, &vars, e.reshape(&[1, 4, 1, 32, 32]).unwrap()).unwrap();
    let feats = g.value(out.features).data().to_vec();
    let c = p.arch.channels;
    let direct = p.frame_features(&frame).unwrap();
    for t in 0..4 {
        assert_eq!(&feats[t * c..(t + 1) * c], direct.as_slice());
    }
    // Perturbing a kernel moves every frame's features identically.
    p.convs[0].kernel.data_mut()[0] += 0.25;
    let after = p.frame_features(&frame).unwrap();
    assert_ne!(after, direct);
}

#[test]
fn zero_frame_with_zero_biases_gives_zero_features() {
    let p = ModelParams::<f64>::init(small_arch(2), 1).unwrap();
    let f = p.frame_features(&Tensor::zeros(&[1, 32, 32])).unwrap();
    assert_eq!(f, vec![0.0; p.arch.channels]);
}

#[test]
fn feature_length_follows_channels_for_any_valid_size() {
    for (hw, ch) in [(32, 4), (64, 6), (96, 3)] {
        let arch = ArchConfig {
            channels: ch,
            lstm_hidden: 2,
            input_hw: [hw, hw],
            frames_per_epoch: 1,
            ..ArchConfig::default()
        };
        let p = ModelParams::<f32>::init(arch, 0).unwrap();
        assert_eq!(p.frame_features(&Tensor::zeros(&[1, hw, hw])).unwrap().len(), ch);
    }
}

/// Layer-by-layer reference built from the loop convolution oracle.
fn features_oracle(p: &ModelParams<f64>, frame: &Tensor<f64>) -> Vec<f64> {
    let [h, w] = p.arch.input_hw;
    let mut x = frame.clone().reshape(&[1, 1, h, w]).unwrap();
    let cpb = p.arch.convs_per_block;
    for (i, conv) in p.convs.iter().enumerate() {
        x = conv2d_oracle(&x, &conv.kernel, conv.bias.data(), p.arch.kernel / 2);
        let s = p.arch.leaky_slope;
        x = x.map(|v| if v >= 0.0 { v } else { s * v });
        if i % cpb == cpb - 1 {
            let [c, hh, ww] = [x.shape()[1], x.shape()[2], x.shape()[3]];
            let mut y = Tensor::zeros(&[1, c, hh / 2, ww / 2]);
            for ci in 0..c {
                for r in 0..hh / 2 {
                    for q in 0..ww / 2 {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dy, dx)| x.at(&[0, ci, 2 * r + dy, 2 * q + dx]))
                            .fold(f64::NEG_INFINITY, f64::max);
                        y.set(&[0, ci, r, q], m);
                    }
                }
            }
            x = y;
        }
    }
    let [c, hh, ww] = [x.shape()[1], x.shape()[2], x.shape()[3]];
    (0..c)
        .map(|ci| (0..hh * ww).map(|i| x.data()[ci * hh * ww + i]).sum::<f64>() / (hh * ww) as f64)
        .collect()
}

#[test]
fn frame_features_match_layer_oracle_and_scale_homogeneously() {
    let p = ModelParams::<f64>::init(small_arch(1), 21).unwrap();
    let frame = randn(&[1, 32, 32], &mut rng(22));
    let got = p.frame_features(&frame).unwrap();
    let want = features_oracle(&p, &frame);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
    }
    // Zero biases: every stage is positively homogeneous.
    let doubled = p.frame_features(&frame.map(|v| 2.0 * v)).unwrap();
    for (a, b) in doubled.iter().zip(&got) {
        assert!((a - 2.0 * b).abs() < 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn end_to_end_gradient_check() {
    let arch = ArchConfig {
        channels: 8,
        lstm_hidden: 8,
        input_hw: [32, 32],
        frames_per_epoch: 4,
        ..ArchConfig::default()
    };
    let mut p = ModelParams::<f64>::init(arch.clone(), 5).unwrap();
    randomize_biases(&mut p, 6);
    let frames = randn(&[2, 4, 1, 32, 32], &mut rng(7));
    let inputs: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
    let mut r = rng(8);
    let mut at = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..t.len().min(6) {
            at.push((i, r.random_range(0..t.len())));
        }
    }
    let model = p.clone();
    let rep = check_gradients_at(&inputs, FD_STEP, &at, |g, vars| {
        let pv = ParamVars::from_slice(&arch, vars)?;
        let out = model.forward_graph(g, &pv, frames.clone())?;
        g.focal_loss(out.probs, &[0, 2], 2.0, None)
    })
    .unwrap();
    assert!(rep.max_rel_err < FD_TOL, "max rel err {:.3e} at {:?}", rep.max_rel_err, rep.worst);
    // Retries only happen where a step straddles a kink; most positions are smooth.
    assert!(rep.kink_retries * 10 < at.len(), "{} kink retries", rep.kink_retries);
    assert_eq!(rep.checked, at.len());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut p = ModelParams::<f32>::init(small_arch(3), 4).unwrap();
    p.input_scale = 12.5;
    let bytes = write_checkpoint(&p).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let q = read_checkpoint(&bytes).unwrap();
    assert_eq!(p, q);
    let e = random_epoch(3, 1).cast::<f32>();
    assert_eq!(p.forward(&e).unwrap(), q.forward(&e).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let p = ModelParams::<f32>::init(small_arch(2), 4).unwrap();
    let bytes = write_checkpoint(&p).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad).is_err());
}

#[test]
fn argmax_tie_rule() {
    assert_eq!(argmax_lower_tie(&[0.5, 0.3, 0.2]), 0);
    assert_eq!(argmax_lower_tie(&[0.4, 0.4, 0.2]), 0);
    assert_eq!(argmax_lower_tie(&[0.1, 0.2, 0.7]), 2);
    assert_eq!(argmax_lower_tie(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn invalid_architectures_name_the_key() {
    let bad = ArchConfig {
        input_hw: [30, 32],
        ..ArchConfig::tiny()
    };
    match ModelParams::<f32>::init(bad, 0) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "input_hw"),
        other => panic!("unexpected {other:?}"),
    }
    let bad = ArchConfig {
        n_classes: 4,
        ..ArchConfig::tiny()
    };
    assert!(matches!(ModelParams::<f32>::init(bad, 0), Err(Error::Config { .. })));
}

#[test]
fn default_architecture_matches_published_layout() {
    let a = ArchConfig::default();
    assert_eq!((a.n_conv_blocks, a.convs_per_block, a.channels, a.lstm_hidden), (5, 2, 64, 64));
    assert_eq!((a.input_hw, a.frames_per_epoch), ([128, 128], 168));
    let p = ModelParams::<f32>::init(ArchConfig { convs_per_block: 1, ..a }, 0).unwrap();
    assert_eq!(p.convs.len(), 5);
    // Same padding halves 128 five times down to 4x4 before pooling to a vector.
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 64, 8, 8]));
    let k = g.input(Tensor::zeros(&[64, 64, 3, 3]));
    let b = g.input(Tensor::zeros(&[64]));
    let y = g.conv2d(x, k, b, Padding::Same).unwrap();
    let y = g.max_pool2d(y).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 64, 4, 4]);
}
