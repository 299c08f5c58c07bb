//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to propagate gradients. [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of every node that depends on a leaf
//! created with `requires_grad`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    GlobalAvgPool {
        input: Var,
        area: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SelectStep {
        x: Var,
        step: usize,
    },
    StackSteps(Vec<Var>),
    SoftmaxRows(Var),
    WeightedSum {
        alpha: Var,
        seq: Var,
    },
    FocalLoss {
        probs: Var,
        targets: Vec<usize>,
        gamma: f64,
        weights: Option<Vec<f64>>,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-7;

fn rows_cols<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

/// Splits a 3-D `[C,H,W]` or 4-D `[N,C,H,W]` shape into `(n, c, h, w, batched)`.
fn image_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::dim(format!(
            "{what}: expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf (no gradient tracked).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise branch taken so far: the sign of each
    /// leaky-ReLU input and each pooling argmax. Two evaluations with equal
    /// signatures lie on the same linear piece of those operations.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    for &v in self.value(*input).data() {
                        (v >= T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (n, c, h, w, batched) = image_dims(self.value(input).shape(), "conv2d input")?;
        let (c_out, kc, k) = match *self.value(kernel).shape() {
            [o, ci, kh, kw] if kh == kw => (o, ci, kh),
            ref s => return Err(Error::dim(format!("conv2d kernel must be [O,C,k,k], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel size {k} must be odd")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::dim(format!(
                        "valid conv2d needs spatial extent >= {k}, got {h}x{w}"
                    )));
                }
                0
            }
        };
        let geom = ConvGeom {
            n,
            c_in: c,
            h,
            w,
            c_out,
            k,
            pad,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let shape: Vec<usize> = if batched {
            vec![n, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w, batched) = image_dims(self.value(input).shape(), "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("max_pool2d needs H,W >= 2, got {h}x{w}")));
        }
        let (data, argmax) = kernels::max_pool2x2_forward(self.value(input).data(), n * c, h, w);
        let shape: Vec<usize> = if batched {
            vec![n, c, h / 2, w / 2]
        } else {
            vec![c, h / 2, w / 2]
        };
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, data)?, Op::MaxPool { input, argmax }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Domain(format!("leaky slope {slope} outside [0,1)")));
        }
        let s = T::from_f64_lossy(slope);
        let value = self
            .value(input)
            .map(|x| if x >= T::zero() { x } else { s * x });
        let rg = self.rg(input);
        Ok(self.push(value, Op::LeakyRelu { input, slope: s }, rg))
    }

    /// `[C,H,W] -> [C]` or `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w, batched) = image_dims(self.value(input).shape(), "global_avg_pool")?;
        let data = kernels::global_avg_pool_forward(self.value(input).data(), n * c, h * w);
        let shape: Vec<usize> = if batched { vec![n, c] } else { vec![c] };
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::GlobalAvgPool {
                input,
                area: h * w,
            },
            rg,
        ))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul lhs")?;
        let (br, bc) = rows_cols(self.value(b), "matmul rhs")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {k} vs {kb}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let bm = MatRefOwned::of(self.value(b), trans_b);
        super::gemm(
            super::MatRef::row_major(self.value(a).data(), m, k),
            bm.view(self.value(b)),
            &mut out,
            T::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[M,K] x [N,K]^T -> [M,N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.value(x).shape().last().unwrap();
        if self.value(bias).shape() != [c] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis {c}",
                self.value(bias).shape()
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x), "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "slice {start}..{} out of {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.value(p), "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let r = rows.ok_or_else(|| Error::dim("concat_cols: nothing to concatenate"))?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[B,T,D] -> [B,D]` at time `step`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let (b, t, d) = match *self.value(x).shape() {
            [b, t, d] => (b, t, d),
            ref s => return Err(Error::dim(format!("select_step expects [B,T,D], got {s:?}"))),
        };
        if step >= t {
            return Err(Error::dim(format!("step {step} out of {t}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * t + step) * d;
            out.extend_from_slice(&src[off..off + d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, d], out)?, Op::SelectStep { x, step }, rg))
    }

    /// Stacks `T` matrices `[B,D]` into `[B,T,D]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::dim("stack_steps: empty sequence"))?;
        let (b, d) = rows_cols(self.value(first), "stack_steps")?;
        for &s in steps {
            if self.value(s).shape() != [b, d] {
                return Err(Error::dim("stack_steps: step shapes differ"));
            }
        }
        let t = steps.len();
        let mut out = vec![T::zero(); b * t * d];
        for (ti, &s) in steps.iter().enumerate() {
            for (bi, row) in self.value(s).data().chunks(d).enumerate() {
                let off = (bi * t + ti) * d;
                out[off..off + d].copy_from_slice(row);
            }
        }
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(Tensor::new(&[b, t, d], out)?, Op::StackSteps(steps.to_vec()), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.value(x), "softmax_rows")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// `out[b] = sum_t alpha[b,t] * seq[b,t,:]`.
    pub fn weighted_sum_steps(&mut self, alpha: Var, seq: Var) -> Result<Var> {
        let (b, t) = rows_cols(self.value(alpha), "weighted_sum alpha")?;
        let d = match *self.value(seq).shape() {
            [sb, st, d] if sb == b && st == t => d,
            ref s => {
                return Err(Error::dim(format!(
                    "weighted_sum: seq {s:?} incompatible with alpha [{b},{t}]"
                )))
            }
        };
        let a = self.value(alpha).data();
        let s = self.value(seq).data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let w = a[bi * t + ti];
                let row = &s[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (ov, &rv) in o.iter_mut().zip(row) {
                    *ov += w * rv;
                }
            }
        }
        let rg = self.rg(alpha) || self.rg(seq);
        Ok(self.push(Tensor::new(&[b, d], out)?, Op::WeightedSum { alpha, seq }, rg))
    }

    /// Mean focal loss `-(w_y) (1-p_t)^gamma ln p_t` over a `[B,C]` batch of
    /// probabilities.
    pub fn focal_loss(
        &mut self,
        probs: Var,
        targets: &[usize],
        gamma: f64,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (b, c) = rows_cols(self.value(probs), "focal_loss")?;
        if targets.len() != b {
            return Err(Error::dim(format!(
                "focal_loss: {} targets for batch of {b}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Domain(format!("target class {bad} outside 0..{c}")));
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::dim(format!("{} class weights for {c} classes", w.len())));
            }
        }
        let p = self.value(probs).data();
        let mut total = 0.0;
        for (bi, &t) in targets.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[t]);
            total += w * focal_term(p[bi * c + t].to_f64_lossy(), gamma);
        }
        let loss = T::from_f64_lossy(total / b as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalLoss {
                probs,
                targets: targets.to_vec(),
                gamma,
                weights: weights.map(|w| w.to_vec()),
            },
            rg,
        ))
    }

    /// Scalar `sum(x * weights)` for a constant `weights` tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::dim("dot_const: shape mismatch"));
        }
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, weights }, rg))
    }

    /// Gradients of a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::full(self.value(loss).shape(), T::one()))
    }

    /// Propagates an arbitrary output cotangent `seed` back through the tape.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::dim("backward seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let r = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(dx) = r.input {
                    self.accumulate(grads, *input, Tensor::new(self.value(*input).shape(), dx)?);
                }
                if let Some(dk) = r.kernel {
                    self.accumulate(grads, *kernel, Tensor::new(self.value(*kernel).shape(), dk)?);
                }
                self.accumulate(grads, *bias, Tensor::new(&[geom.c_out], r.bias)?);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let d = dx.data_mut();
                for (&j, &gv) in argmax.iter().zip(g.data()) {
                    d[j] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let data = x
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv >= T::zero() { gv } else { *slope * gv })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(self.value(*input).shape(), data)?);
            }
            Op::GlobalAvgPool { input, area } => {
                let inv = T::from_f64_lossy(1.0 / *area as f64);
                let mut data = Vec::with_capacity(g.len() * area);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, *area));
                }
                self.accumulate(grads, *input, Tensor::new(self.value(*input).shape(), data)?);
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(self.value(*a), "matmul")?;
                let n = g.shape()[1];
                let gm = super::MatRef::row_major(g.data(), m, n);
                if self.rg(*a) {
                    // dA = G * op(B)^T
                    let bv = self.value(*b);
                    let opb_t = MatRefOwned::of(bv, !*trans_b);
                    let mut da = vec![T::zero(); m * k];
                    super::gemm(gm, opb_t.view(bv), &mut da, T::zero());
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.rg(*b) {
                    let am = super::MatRef::row_major(self.value(*a).data(), m, k);
                    let db = if *trans_b {
                        // B is [N,K]: dB = G^T A
                        let mut db = vec![T::zero(); n * k];
                        super::gemm(gm.t(), am, &mut db, T::zero());
                        db
                    } else {
                        // B is [K,N]: dB = A^T G
                        let mut db = vec![T::zero(); k * n];
                        super::gemm(am.t(), gm, &mut db, T::zero());
                        db
                    };
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut da = g.clone();
                    for (d, &bv) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= bv;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = g.clone();
                    for (d, &av) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= av;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= T::one() - y * y;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = rows_cols(self.value(*x), "slice_cols")?;
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(&[r, c]);
                for (row, grow) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (r, c) = rows_cols(self.value(p), "concat_cols")?;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for row in g.data().chunks(total) {
                            dp.extend_from_slice(&row[off..off + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[r, c], dp)?);
                    }
                    off += c;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshape(self.value(*x).shape())?);
            }
            Op::SelectStep { x, step } => {
                let shape = self.value(*x).shape().to_vec();
                let (t, d) = (shape[1], shape[2]);
                let mut dx = Tensor::zeros(&shape);
                let data = dx.data_mut();
                for (bi, row) in g.data().chunks(d).enumerate() {
                    let off = (bi * t + step) * d;
                    data[off..off + d].copy_from_slice(row);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StackSteps(steps) => {
                let (_, t, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (ti, &s) in steps.iter().enumerate() {
                    if !self.rg(s) {
                        continue;
                    }
                    let b = self.value(s).shape()[0];
                    let mut ds = Vec::with_capacity(b * d);
                    for bi in 0..b {
                        let off = (bi * t + ti) * d;
                        ds.extend_from_slice(&g.data()[off..off + d]);
                    }
                    self.accumulate(grads, s, Tensor::new(&[b, d], ds)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum { alpha, seq } => {
                let (b, t) = rows_cols(self.value(*alpha), "weighted_sum")?;
                let d = g.shape()[1];
                let a = self.value(*alpha).data();
                let s = self.value(*seq).data();
                let gd = g.data();
                if self.rg(*alpha) {
                    let mut da = vec![T::zero(); b * t];
                    for bi in 0..b {
                        let grow = &gd[bi * d..(bi + 1) * d];
                        for ti in 0..t {
                            let row = &s[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            da[bi * t + ti] = row.iter().zip(grow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *alpha, Tensor::new(&[b, t], da)?);
                }
                if self.rg(*seq) {
                    let mut ds = vec![T::zero(); b * t * d];
                    for bi in 0..b {
                        let grow = &gd[bi * d..(bi + 1) * d];
                        for ti in 0..t {
                            let w = a[bi * t + ti];
                            let row = &mut ds[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            for (r, &gv) in row.iter_mut().zip(grow) {
                                *r = w * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *seq, Tensor::new(&[b, t, d], ds)?);
                }
            }
            Op::FocalLoss {
                probs,
                targets,
                gamma,
                weights,
            } => {
                let (b, c) = rows_cols(self.value(*probs), "focal_loss")?;
                let p = self.value(*probs).data();
                let upstream = g.data()[0].to_f64_lossy();
                let mut dp = vec![T::zero(); b * c];
                for (bi, &t) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[t]);
                    let d = focal_term_grad(p[bi * c + t].to_f64_lossy(), *gamma);
                    dp[bi * c + t] = T::from_f64_lossy(upstream * w * d / b as f64);
                }
                self.accumulate(grads, *probs, Tensor::new(&[b, c], dp)?);
            }
            Op::DotConst { x, weights } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv));
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Holds the stride choice for a possibly-transposed matrix operand.
struct MatRefOwned {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl MatRefOwned {
    fn of<T: Element>(t: &Tensor<T>, transpose: bool) -> Self {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        if transpose {
            MatRefOwned {
                rows: c,
                cols: r,
                rs: 1,
                cs: c,
            }
        } else {
            MatRefOwned {
                rows: r,
                cols: c,
                rs: c,
                cs: 1,
            }
        }
    }

    fn view<'a, T: Element>(&self, t: &'a Tensor<T>) -> super::MatRef<'a, T> {
        super::MatRef {
            data: t.data(),
            rows: self.rows,
            cols: self.cols,
            row_stride: self.rs,
            col_stride: self.cs,
        }
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-(1-p)^gamma ln p` with `p` clamped to `[P_MIN, 1-P_MIN]`.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_MIN, 1.0 - P_MIN);
    let q = 1.0 - p;
    let w = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    -w * p.ln()
}

fn focal_term_grad(p: f64, gamma: f64) -> f64 {
    if !(P_MIN..=1.0 - P_MIN).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let ce = -1.0 / p;
    if gamma == 0.0 {
        return ce;
    }
    // d/dp [-(q^g) ln p] = g q^(g-1) ln p - q^g / p
    gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) * ce
}
