//! Shared test machinery: the finite-difference gradient suite and
//! brute-force reference implementations.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use wfci_sleep::compute::gradcheck::check_gradients;
use wfci_sleep::compute::{
    additive_attention_graph, bilstm_graph, lstm_step, softmax_dense_graph, Graph, LstmVars, Padding, Tensor, Var,
};
use wfci_sleep::dataset::SleepState;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal samples pushed away from zero so kinks are never straddled.
fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v.signum() * (v.abs() + 0.05)
    })
}

/// Distinct values with gaps far larger than the finite-difference step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

/// Contracts `x` with fixed random weights into a scalar.
fn project(g: &mut Graph<f64>, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let w = randn(g.value(x).shape(), rng);
    g.dot_const(x, w).unwrap()
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: usize,
    pub max_rel_err: f64,
    pub kink_retries: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.shapes >= SHAPES_PER_OP && self.max_rel_err < FD_TOL && self.kink_retries == 0
    }
}

fn run_op<S, F>(op: &'static str, seed: u64, mut sample: S, build: F) -> OpCheck
where
    S: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Var,
{
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    for shape_ix in 0..SHAPES_PER_OP {
        let inputs = sample(&mut r);
        let proj_seed = seed * 1000 + shape_ix as u64;
        let rep = check_gradients(&inputs, FD_STEP, |g, v| Ok(build(g, v, &mut rng(proj_seed)))).unwrap();
        worst = worst.max(rep.max_rel_err);
        kinks += rep.kink_retries;
    }
    OpCheck {
        op,
        shapes: SHAPES_PER_OP,
        max_rel_err: worst,
        kink_retries: kinks,
    }
}

fn lstm_inputs(r: &mut ChaCha8Rng, d: usize, h: usize) -> [Tensor<f64>; 3] {
    [
        randn(&[4 * h, d], r).map(|v| 0.5 * v),
        randn(&[4 * h, h], r).map(|v| 0.5 * v),
        randn(&[4 * h], r).map(|v| 0.5 * v),
    ]
}

/// Finite-difference check of every differentiable operation on
/// `SHAPES_PER_OP` random shapes each, at 64-bit precision.
pub fn gradient_suite() -> Vec<OpCheck> {
    let mut out = Vec::new();

    out.push(run_op(
        "conv2d",
        1,
        |r| {
            let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 3, 5][r.random_range(0..3)];
            let (h, w) = (r.random_range(k..=k + 4), r.random_range(k..=k + 4));
            vec![randn(&[n, c, h, w], r), randn(&[o, c, k, k], r), randn(&[o], r)]
        },
        |g, v, r| {
            let pad = if g.value(v[0]).shape()[0] == 1 { Padding::Valid } else { Padding::Same };
            let y = g.conv2d(v[0], v[1], v[2], pad).unwrap();
            project(g, y, r)
        },
    ));

    out.push(run_op(
        "max_pool2d",
        2,
        |r| {
            let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
            let (h, w) = (r.random_range(2..=7), r.random_range(2..=7));
            vec![distinct(&[n, c, h, w], r)]
        },
        |g, v, r| {
            let y = g.max_pool2d(v[0]).unwrap();
            project(g, y, r)
        },
    ));

    out.push(run_op(
        "leaky_relu",
        3,
        |r| {
            let shape = [r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5)];
            vec![randn_off_zero(&shape, r)]
        },
        |g, v, r| {
            let slope = r.random_range(0.0..0.5);
            let y = g.leaky_relu(v[0], slope).unwrap();
            project(g, y, r)
        },
    ));

    out.push(run_op(
        "global_avg_pool",
        4,
        |r| {
            let shape = [r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5)];
            vec![randn(&shape, r)]
        },
        |g, v, r| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, r)
        },
    ));

    out.push(run_op(
        "lstm_cell",
        5,
        |r| {
            let (b, d, h) = (r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=4));
            let mut v = vec![randn(&[b, d], r), randn(&[b, h], r), randn(&[b, h], r)];
            v.extend(lstm_inputs(r, d, h));
            v
        },
        |g, v, r| {
            let hidden = g.value(v[1]).shape()[1];
            let p = LstmVars {
                w_x: v[3],
                w_h: v[4],
                b: v[5],
                hidden,
            };
            let (h, c) = lstm_step(g, v[0], v[1], v[2], &p).unwrap();
            let a = project(g, h, r);
            let b = project(g, c, r);
            g.add(a, b).unwrap()
        },
    ));

    out.push(run_op(
        "bilstm",
        6,
        |r| {
            let (b, t, d, h) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=4), r.random_range(1..=3));
            let mut v = vec![randn(&[b, t, d], r)];
            v.extend(lstm_inputs(r, d, h));
            v.extend(lstm_inputs(r, d, h));
            v
        },
        |g, v, r| {
            let hidden = g.value(v[2]).shape()[1];
            let mk = |i: usize| LstmVars {
                w_x: v[i],
                w_h: v[i + 1],
                b: v[i + 2],
                hidden,
            };
            let y = bilstm_graph(g, v[0], &mk(1), &mk(4)).unwrap();
            project(g, y, r)
        },
    ));

    out.push(run_op(
        "attention",
        7,
        |r| {
            let (b, t, d) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6));
            vec![randn(&[b, t, d], r), randn(&[1, d], r), randn(&[1], r)]
        },
        |g, v, r| {
            let (alpha, ctx) = additive_attention_graph(g, v[0], v[1], v[2]).unwrap();
            let a = project(g, alpha, r);
            let c = project(g, ctx, r);
            g.add(a, c).unwrap()
        },
    ));

    out.push(run_op(
        "dense_softmax",
        8,
        |r| {
            let (b, d, c) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(2..=4));
            vec![randn(&[b, d], r), randn(&[c, d], r), randn(&[c], r)]
        },
        |g, v, r| {
            let (_, probs) = softmax_dense_graph(g, v[0], v[1], v[2]).unwrap();
            project(g, probs, r)
        },
    ));

    out.push(run_op(
        "focal_loss",
        9,
        |r| {
            let (b, c) = (r.random_range(1..=4), r.random_range(2..=4));
            vec![randn(&[b, c], r)]
        },
        |g, v, r| {
            let [b, c] = [g.value(v[0]).shape()[0], g.value(v[0]).shape()[1]];
            let probs = g.softmax_rows(v[0]).unwrap();
            let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let gamma = [0.0, 0.5, 1.0, 2.0, 3.0][r.random_range(0..5)];
            let weights: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            g.focal_loss(probs, &targets, gamma, Some(&weights)).unwrap()
        },
    ));

    out
}

/// Direct quadruple-loop convolution with zero padding, `[N,C,H,W]`.
pub fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let (oh, ow) = (h + 2 * pad + 1 - ks, w + 2 * pad + 1 - ks);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for dy in 0..ks {
                            for dx in 0..ks {
                                let (iy, ix) = (y + dy, xo + dx);
                                if iy < pad || ix < pad || iy - pad >= h || ix - pad >= w {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy - pad, ix - pad]) * k.at(&[oi, ci, dy, dx]);
                            }
                        }
                    }
                    out.set(&[ni, oi, y, xo], acc);
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar-loop LSTM step with gate order input, forget, candidate, output.
pub fn lstm_oracle(x: &[f64], h: &[f64], c: &[f64], w_x: &Tensor<f64>, w_h: &Tensor<f64>, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hs = h.len();
    let z: Vec<f64> = (0..4 * hs)
        .map(|r| {
            let mut s = b[r];
            for (j, xv) in x.iter().enumerate() {
                s += w_x.at(&[r, j]) * xv;
            }
            for (j, hv) in h.iter().enumerate() {
                s += w_h.at(&[r, j]) * hv;
            }
            s
        })
        .collect();
    let mut h2 = vec![0.0; hs];
    let mut c2 = vec![0.0; hs];
    for u in 0..hs {
        let (i, f, g, o) = (sigmoid(z[u]), sigmoid(z[hs + u]), z[2 * hs + u].tanh(), sigmoid(z[3 * hs + u]));
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

pub fn random_labels(n: usize, r: &mut ChaCha8Rng) -> Vec<SleepState> {
    (0..n).map(|_| SleepState::from_index(r.random_range(0..3)).unwrap()).collect()
}

/// Cohen's kappa from raw tallies, written independently of the library.
pub fn kappa_oracle(a: &[SleepState], b: &[SleepState]) -> Option<f64> {
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut chance = 0.0;
    for s in SleepState::ALL {
        let pa = a.iter().filter(|&&x| x == s).count() as f64 / n;
        let pb = b.iter().filter(|&&x| x == s).count() as f64 / n;
        chance += pa * pb;
    }
    (chance < 1.0).then(|| (agree - chance) / (1.0 - chance))
}

/// Bout count, transition count and total seconds per state by walking the
/// sequence one element at a time.
pub fn fragmentation_oracle(s: &[SleepState], dur: f64) -> ([usize; 3], usize, [f64; 3]) {
    let mut bouts = [0; 3];
    let mut secs = [0.0; 3];
    let mut trans = 0;
    for i in 0..s.len() {
        secs[s[i].index()] += dur;
        if i == 0 || s[i] != s[i - 1] {
            bouts[s[i].index()] += 1;
        }
        if i > 0 && s[i] != s[i - 1] {
            trans += 1;
        }
    }
    (bouts, trans, secs)
}

/// Largest ratiometric residual of a planted 10% common-mode hemodynamic
/// confound relative to the confound amplitude. The corrected output is
/// compared with the same recording synthesized without the confound; both go
/// through dark subtraction and the ratio only. Linear detrending runs before
/// the ratio in the full pipeline and, being subtractive, does not commute
/// with a multiplicative confound.
pub fn hemodynamic_residual() -> f64 {
    use wfci_sleep::preprocess::{ratiometric_correct, subtract_dark, Channel};
    use wfci_sleep::synth::{generate, SynthSpec};
    let amp = 0.1;
    let spec = SynthSpec {
        snr: None,
        trend: 0.0,
        hemodynamic_amplitude: amp,
        n_epochs: 20,
        ..SynthSpec::default()
    };
    let flat = SynthSpec {
        hemodynamic_amplitude: 0.0,
        ..spec.clone()
    };
    let corrected = |s: &SynthSpec| {
        let mut stack = generate(s).unwrap().stack;
        subtract_dark(&mut stack).unwrap();
        let (blue, green) = (stack.channel(Channel::Blue).unwrap(), stack.channel(Channel::Green).unwrap());
        ratiometric_correct(&blue, &green, &stack.mask).unwrap().0
    };
    let (with, without) = (corrected(&spec), corrected(&flat));
    let worst = with
        .data()
        .iter()
        .zip(without.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    worst / amp
}

/// Largest |Pearson r| between any brain pixel after global signal
/// regression and the global signal before it, on a random stack.
pub fn gsr_max_abs_corr(seed: u64) -> f64 {
    use wfci_sleep::preprocess::{global_signal_regress, Mask};
    let mut r = rng(seed);
    let (t, h, w) = (200, 6, 7);
    let common = randn(&[t], &mut r);
    let mut x = randn(&[t, h, w], &mut r);
    for (i, f) in x.data_mut().chunks_exact_mut(h * w).enumerate() {
        for (p, v) in f.iter_mut().enumerate() {
            *v += (1.0 + p as f64 / 10.0) * common.data()[i] + 5.0;
        }
    }
    let mask = Mask::new(h, w, (0..h * w).map(|p| p % 5 != 0).collect()).unwrap();
    let brain: Vec<usize> = (0..h * w).filter(|&p| mask.data[p]).collect();
    let g: Vec<f64> = x
        .data()
        .chunks_exact(h * w)
        .map(|f| brain.iter().map(|&p| f[p]).sum::<f64>() / brain.len() as f64)
        .collect();
    global_signal_regress(&mut x, &mask).unwrap();
    brain
        .iter()
        .map(|&p| {
            let y: Vec<f64> = x.data().chunks_exact(h * w).map(|f| f[p]).collect();
            pearson(&y, &g).abs()
        })
        .fold(0.0, f64::max)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Largest relative deviation of `conv2d` (same and valid padding, 64-bit)
/// from the loop oracle over 30 random shapes.
pub fn conv_oracle_suite() -> f64 {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for trial in 0..30 {
        let k = [1, 3, 5][trial % 3];
        let (n, c, o, h, w) = (1 + trial % 2, 1 + trial % 3, 1 + trial % 4, k + trial % 5, k + 2 + trial % 3);
        let x = randn(&[n, c, h, w], &mut r);
        let kern = randn(&[o, c, k, k], &mut r);
        let b = randn(&[o], &mut r);
        for (pad, mode) in [(k / 2, Padding::Same), (0, Padding::Valid)] {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.input(x.clone()), g.input(kern.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, kv, bv, mode).unwrap();
            let want = conv2d_oracle(&x, &kern, b.data(), pad);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, e) in g.value(y).data().iter().zip(want.data()) {
                worst = worst.max((a - e).abs() / e.abs().max(1.0));
            }
        }
    }
    worst
}

/// Largest absolute deviation of `bilstm` from unrolled scalar cells run
/// forward and backward over 10 random sequences.
pub fn bilstm_oracle_suite() -> f64 {
    use wfci_sleep::compute::{bilstm, LstmCellParams};
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let (t, d, h) = (2 + trial % 5, 1 + trial % 4, 1 + trial % 3);
        let seq = randn(&[t, d], &mut r);
        let fwd = LstmCellParams::<f64>::init(d, h, &mut r);
        let bwd = LstmCellParams::<f64>::init(d, h, &mut r);
        let out = bilstm(&seq, &fwd, &bwd).unwrap();
        let (mut hf, mut cf) = (vec![0.0; h], vec![0.0; h]);
        for step in 0..t {
            (hf, cf) = lstm_oracle(seq.outer(step), &hf, &cf, &fwd.w_x, &fwd.w_h, fwd.b.data());
            for u in 0..h {
                worst = worst.max((out.at(&[step, u]) - hf[u]).abs());
            }
        }
        let (mut hb, mut cb) = (vec![0.0; h], vec![0.0; h]);
        for step in (0..t).rev() {
            (hb, cb) = lstm_oracle(seq.outer(step), &hb, &cb, &bwd.w_x, &bwd.w_h, bwd.b.data());
            for u in 0..h {
                worst = worst.max((out.at(&[step, h + u]) - hb[u]).abs());
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LabelOracle {
    pub pairs: usize,
    /// Pairs where an integer tally (confusion cell, bouts, transitions) differed.
    pub integer_mismatches: usize,
    /// Largest deviation of kappa, precision, recall, accuracy or mean bout length.
    pub max_float_err: f64,
}

/// Compares confusion, kappa, per-class rates and fragmentation against
/// brute-force tallies on `pairs` random label pairs of random length.
pub fn label_oracle_suite(pairs: usize, seed: u64) -> LabelOracle {
    use wfci_sleep::eval::{classification_metrics, cohens_kappa, confusion, fragmentation, Hypnogram};
    let mut r = rng(seed);
    let mut out = LabelOracle {
        pairs,
        ..LabelOracle::default()
    };
    for _ in 0..pairs {
        let n = r.random_range(1..=200);
        // Skewed marginals now and then so degenerate cases turn up.
        let a = if r.random_bool(0.1) {
            vec![SleepState::from_index(r.random_range(0..3)).unwrap(); n]
        } else {
            random_labels(n, &mut r)
        };
        let b = random_labels(n, &mut r);
        let cm = confusion(&a, &b).unwrap();
        let mut bad = false;
        for x in SleepState::ALL {
            for y in SleepState::ALL {
                let tally = a.iter().zip(&b).filter(|(p, q)| **p == x && **q == y).count() as u64;
                bad |= cm.counts[x.index()][y.index()] != tally;
            }
        }
        let k = cohens_kappa(&a, &b).unwrap();
        let mut err: f64 = match kappa_oracle(&a, &b) {
            Some(v) => (k.value - v).abs(),
            None => {
                bad |= !k.degenerate;
                0.0
            }
        };
        let m = classification_metrics(&cm).unwrap();
        for s in SleepState::ALL {
            let tp = a.iter().zip(&b).filter(|(p, q)| **p == s && **q == s).count() as f64;
            let pred = b.iter().filter(|&&q| q == s).count() as f64;
            let refc = a.iter().filter(|&&p| p == s).count() as f64;
            let c = &m.per_class[s.index()];
            if pred > 0.0 {
                err = err.max((c.precision - tp / pred).abs());
            }
            if refc > 0.0 {
                err = err.max((c.recall - tp / refc).abs());
            }
        }
        let acc = a.iter().zip(&b).filter(|(p, q)| p == q).count() as f64 / n as f64;
        err = err.max((m.accuracy - acc).abs());

        let dur = [1.0, 2.0, 10.0][r.random_range(0..3)];
        let f = fragmentation(&[Hypnogram::from_states("x", dur, &a)]).unwrap();
        let (bouts, trans, secs) = fragmentation_oracle(&a, dur);
        bad |= f.bouts != bouts || f.transitions != trans;
        bad |= f.transitions + 1 != bouts.iter().sum::<usize>();
        for c in 0..3 {
            match f.mean_bout_s[c] {
                Some(v) => err = err.max((v - secs[c] / bouts[c] as f64).abs()),
                None => bad |= bouts[c] != 0,
            }
        }
        out.integer_mismatches += bad as usize;
        out.max_float_err = out.max_float_err.max(err);
    }
    out
}

/// Fraction of total power in the delta band for a unit 2 Hz sine, and the
/// delta/theta ratio for a unit 7 Hz sine, each 168 samples at 16.8 Hz.
pub fn sine_band_checks() -> (f64, f64, bool) {
    use wfci_sleep::eval::spectral::{band_power, periodogram, total_power};
    use wfci_sleep::eval::{DELTA, THETA};
    let sine = |f: f64| -> Vec<f64> {
        (0..168).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16.8).sin()).collect()
    };
    let (fr, p2) = periodogram(&sine(2.0), 16.8).unwrap();
    let delta_frac = band_power(&fr, &p2, DELTA) / total_power(&fr, &p2);
    let (fr, p7) = periodogram(&sine(7.0), 16.8).unwrap();
    let ratio = band_power(&fr, &p7, DELTA) / band_power(&fr, &p7, THETA);
    let bands = (DELTA.lo, DELTA.hi, THETA.lo, THETA.hi) == (0.4, 4.0, 6.0, 8.0);
    (delta_frac, ratio, bands)
}
