//! Recurrent, attention and dense layers composed from graph primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{softmax_in_place, Graph, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Gate order inside the stacked matrices is `[input, forget, candidate, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T> {
    /// `[4H, D]`
    pub w_x: Tensor<T>,
    /// `[4H, H]`
    pub w_h: Tensor<T>,
    /// `[4H]`
    pub b: Tensor<T>,
}

impl<T: Element> LstmCellParams<T> {
    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_x: Tensor::zeros(&[4 * hidden, input_dim]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform `±1/sqrt(H)` weights, zero biases except the forget slice at 1.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut sample = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64_lossy(dist.sample(rng)))
                .collect()
        };
        let w_x = Tensor::new(&[4 * hidden, input_dim], sample(4 * hidden * input_dim))
            .expect("shape");
        let w_h = Tensor::new(&[4 * hidden, hidden], sample(4 * hidden * hidden)).expect("shape");
        let mut b = Tensor::zeros(&[4 * hidden]);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        LstmCellParams { w_x, w_h, b }
    }

    pub fn validate(&self) -> Result<()> {
        let h4 = self.b.len();
        if h4 % 4 != 0 || self.b.ndim() != 1 {
            return Err(Error::dim("lstm bias length must be 4H"));
        }
        let h = h4 / 4;
        if self.w_h.shape() != [h4, h] || self.w_x.ndim() != 2 || self.w_x.shape()[0] != h4 {
            return Err(Error::dim(format!(
                "lstm weights inconsistent: w_x {:?}, w_h {:?}, b {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> LstmVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        LstmVars {
            w_x: leaf(&self.w_x),
            w_h: leaf(&self.w_h),
            b: leaf(&self.b),
            hidden: self.hidden(),
        }
    }
}

/// Graph handles for one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One LSTM step on a batch: `x [B,D]`, `h, c [B,H]` -> `(h, c)`.
pub fn lstm_step<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hs = p.hidden;
    let zx = g.matmul_nt(x, p.w_x)?;
    let zh = g.matmul_nt(h_prev, p.w_h)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, p.b)?;
    let i = g.slice_cols(z, 0, hs)?;
    let f = g.slice_cols(z, hs, hs)?;
    let cand = g.slice_cols(z, 2 * hs, hs)?;
    let o = g.slice_cols(z, 3 * hs, hs)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let fc = g.mul(f, c_prev)?;
    let ig = g.mul(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Single LSTM cell evaluation on plain vectors.
pub fn lstm_cell<T: Element>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    params: &LstmCellParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    params.validate()?;
    let (d, hs) = (params.input_dim(), params.hidden());
    if x.len() != d || h_prev.len() != hs || c_prev.len() != hs {
        return Err(Error::dim(format!(
            "lstm_cell expects x[{d}], h[{hs}], c[{hs}]; got x[{}], h[{}], c[{}]",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let xv = g.input(Tensor::new(&[1, d], x.to_vec())?);
    let hv = g.input(Tensor::new(&[1, hs], h_prev.to_vec())?);
    let cv = g.input(Tensor::new(&[1, hs], c_prev.to_vec())?);
    let (h, c) = lstm_step(&mut g, xv, hv, cv, &vars)?;
    let (h, c) = (g.value(h).clone(), g.value(c).clone());
    if !h.is_finite() || !c.is_finite() {
        return Err(Error::Numeric("non-finite LSTM activation".into()));
    }
    Ok((h.into_data(), c.into_data()))
}

/// Bidirectional LSTM over `seq [B,T,D]` from zero initial states.
/// Row `t` of the result is `concat(h_fwd[t], h_bwd[t])`, shape `[B,T,2H]`.
pub fn bilstm_graph<T: Element>(
    g: &mut Graph<T>,
    seq: Var,
    fwd: &LstmVars,
    bwd: &LstmVars,
) -> Result<Var> {
    let (b, t) = match *g.value(seq).shape() {
        [b, t, _] => (b, t),
        ref s => return Err(Error::dim(format!("bilstm expects [B,T,D], got {s:?}"))),
    };
    let run = |g: &mut Graph<T>, p: &LstmVars, order: &mut dyn Iterator<Item = usize>| {
        let mut h = g.input(Tensor::zeros(&[b, p.hidden]));
        let mut c = g.input(Tensor::zeros(&[b, p.hidden]));
        let mut out = vec![None; t];
        for step in order {
            let x = g.select_step(seq, step)?;
            (h, c) = lstm_step(g, x, h, c, p)?;
            out[step] = Some(h);
        }
        Ok::<Vec<Var>, Error>(out.into_iter().map(|v| v.expect("every step visited")).collect())
    };
    let hf = run(g, fwd, &mut (0..t))?;
    let hb = run(g, bwd, &mut (0..t).rev())?;
    let rows = hf
        .iter()
        .zip(&hb)
        .map(|(&a, &b)| g.concat_cols(&[a, b]))
        .collect::<Result<Vec<_>>>()?;
    g.stack_steps(&rows)
}

/// Plain-tensor bidirectional LSTM: `seq [T,D] -> [T,2H]`.
pub fn bilstm<T: Element>(
    seq: &Tensor<T>,
    fwd: &LstmCellParams<T>,
    bwd: &LstmCellParams<T>,
) -> Result<Tensor<T>> {
    let (t, d) = match *seq.shape() {
        [t, d] => (t, d),
        ref s => return Err(Error::dim(format!("bilstm expects [T,D], got {s:?}"))),
    };
    fwd.validate()?;
    bwd.validate()?;
    let mut g = Graph::new();
    let fv = fwd.register(&mut g, false);
    let bv = bwd.register(&mut g, false);
    let x = g.input(seq.clone().reshape(&[1, t, d])?);
    let out = bilstm_graph(&mut g, x, &fv, &bv)?;
    let h2 = g.value(out).shape()[2];
    g.value(out).clone().reshape(&[t, h2])
}

/// Additive score weights: `s_i = tanh(w . h_i + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `[1, 2H]`
    pub w: Tensor<T>,
    /// `[1]`
    pub b: Tensor<T>,
}

impl<T: Element> AttentionParams<T> {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        AttentionParams {
            w: normal_tensor(&[1, dim], (1.0 / dim as f64).sqrt(), rng),
            b: Tensor::zeros(&[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `[T]`, nonnegative, sums to 1.
    pub alpha: Vec<T>,
    /// `[2H]`
    pub context: Vec<T>,
}

/// Graph version over a batch: `hseq [B,T,D] -> (alpha [B,T], context [B,D])`.
pub fn additive_attention_graph<T: Element>(
    g: &mut Graph<T>,
    hseq: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let (bs, t, d) = match *g.value(hseq).shape() {
        [bs, t, d] => (bs, t, d),
        ref s => return Err(Error::dim(format!("attention expects [B,T,D], got {s:?}"))),
    };
    let flat = g.reshape(hseq, &[bs * t, d])?;
    let s = g.matmul_nt(flat, w)?;
    let s = g.add_bias(s, b)?;
    let s = g.tanh(s);
    let s = g.reshape(s, &[bs, t])?;
    let alpha = g.softmax_rows(s)?;
    let ctx = g.weighted_sum_steps(alpha, hseq)?;
    Ok((alpha, ctx))
}

/// `h_seq [T, D]` -> attention weights and context vector.
pub fn additive_attention<T: Element>(
    h_seq: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    let (t, d) = match *h_seq.shape() {
        [t, d] => (t, d),
        ref s => return Err(Error::dim(format!("attention expects [T,D], got {s:?}"))),
    };
    let mut g = Graph::new();
    let w = g.input(params.w.clone());
    let b = g.input(params.b.clone());
    let x = g.input(h_seq.clone().reshape(&[1, t, d])?);
    let (alpha, ctx) = additive_attention_graph(&mut g, x, w, b)?;
    Ok(AttentionOutput {
        alpha: g.value(alpha).data().to_vec(),
        context: g.value(ctx).data().to_vec(),
    })
}

/// Graph version: `v [B,D]`, `w [C,D]`, `b [C]` -> `(logits, probs)`.
pub fn softmax_dense_graph<T: Element>(
    g: &mut Graph<T>,
    v: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let logits = g.matmul_nt(v, w)?;
    let logits = g.add_bias(logits, b)?;
    let probs = g.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// Dense layer followed by a stable softmax.
pub fn softmax_dense<T: Element>(h: &[T], w: &Tensor<T>, b: &[T]) -> Result<Vec<T>> {
    let (c, d) = match *w.shape() {
        [c, d] => (c, d),
        ref s => return Err(Error::dim(format!("dense weight must be [C,D], got {s:?}"))),
    };
    if h.len() != d || b.len() != c {
        return Err(Error::dim(format!(
            "dense expects h[{d}], b[{c}]; got h[{}], b[{}]",
            h.len(),
            b.len()
        )));
    }
    let mut logits: Vec<T> = (0..c)
        .map(|i| {
            let row = &w.data()[i * d..(i + 1) * d];
            row.iter().zip(h).map(|(&a, &x)| a * x).sum::<T>() + b[i]
        })
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Stable softmax of a logit vector.
pub fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

pub(crate) fn normal_tensor<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}
