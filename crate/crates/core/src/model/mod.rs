//! The CNN-BiLSTM-attention network.
//!
//! Each frame of an epoch passes through the same convolutional stack
//! (`conv -> LeakyReLU` repeated `convs_per_block` times, then 2x2 max
//! pooling, for every block) and is reduced to a channel vector by global
//! average pooling. The per-frame vectors form a sequence for a single
//! bidirectional LSTM layer, whose outputs are pooled by additive attention
//! and classified by a dense softmax layer.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};

use crate::compute::{
    additive_attention_graph, bilstm_graph, normal_tensor, softmax_dense_graph, AttentionParams,
    Element, Graph, LstmCellParams, LstmVars, Padding, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub n_conv_blocks: usize,
    pub convs_per_block: usize,
    pub channels: usize,
    pub kernel: usize,
    pub lstm_hidden: usize,
    pub n_classes: usize,
    pub input_hw: [usize; 2],
    pub frames_per_epoch: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    /// 128x128 frames, 168 frames per 10-s epoch, 64 kernels, 64 LSTM units.
    fn default() -> Self {
        ArchConfig {
            n_conv_blocks: 5,
            convs_per_block: 2,
            channels: 64,
            kernel: 3,
            lstm_hidden: 64,
            n_classes: 3,
            input_hw: [128, 128],
            frames_per_epoch: 168,
            leaky_slope: 0.3,
        }
    }
}

impl ArchConfig {
    /// Desk-scale network: 32x32 frames, 2-s epochs, 16 kernels, 32 LSTM units.
    /// Three blocks leave the same 8x8 final map as five blocks on 128x128.
    pub fn tiny() -> Self {
        ArchConfig {
            n_conv_blocks: 3,
            channels: 16,
            lstm_hidden: 32,
            input_hw: [32, 32],
            frames_per_epoch: 34,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_conv_blocks", self.n_conv_blocks),
            ("convs_per_block", self.convs_per_block),
            ("channels", self.channels),
            ("kernel", self.kernel),
            ("lstm_hidden", self.lstm_hidden),
            ("frames_per_epoch", self.frames_per_epoch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.n_classes != 3 {
            return Err(Error::config("n_classes", "sleep scoring uses exactly 3 classes"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel", "kernel size must be odd"));
        }
        let div = 1usize << self.n_conv_blocks;
        if self.input_hw.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::config(
                "input_hw",
                format!("both extents must be divisible by 2^{} = {div}", self.n_conv_blocks),
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_convs(&self) -> usize {
        self.n_conv_blocks * self.convs_per_block
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[C_out, C_in, k, k]`
    pub kernel: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
}

/// Every trainable array of the network plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    /// Multiplier applied to input frames before the first convolution.
    pub input_scale: f64,
    pub convs: Vec<ConvLayer<T>>,
    pub lstm_fwd: LstmCellParams<T>,
    pub lstm_bwd: LstmCellParams<T>,
    pub attention: AttentionParams<T>,
    /// `[n_classes, 2H]`
    pub dense_w: Tensor<T>,
    /// `[n_classes]`
    pub dense_b: Tensor<T>,
}

/// Graph handles for every parameter, in [`ModelParams::names`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub convs: Vec<(Var, Var)>,
    pub lstm_fwd: LstmVars,
    pub lstm_bwd: LstmVars,
    pub att_w: Var,
    pub att_b: Var,
    pub dense_w: Var,
    pub dense_b: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.convs.iter().flat_map(|&(k, b)| [k, b]).collect();
        for l in [&self.lstm_fwd, &self.lstm_bwd] {
            v.extend([l.w_x, l.w_h, l.b]);
        }
        v.extend([self.att_w, self.att_b, self.dense_w, self.dense_b]);
        v
    }

    /// Inverse of [`ParamVars::all`] for nodes registered in that order.
    pub fn from_slice(arch: &ArchConfig, vars: &[Var]) -> Result<Self> {
        let nc = arch.n_convs();
        if vars.len() != 2 * nc + 10 {
            return Err(Error::dim(format!(
                "expected {} parameter nodes, got {}",
                2 * nc + 10,
                vars.len()
            )));
        }
        let lstm = |i: usize| LstmVars {
            w_x: vars[i],
            w_h: vars[i + 1],
            b: vars[i + 2],
            hidden: arch.lstm_hidden,
        };
        let o = 2 * nc;
        Ok(ParamVars {
            convs: vars[..o].chunks(2).map(|c| (c[0], c[1])).collect(),
            lstm_fwd: lstm(o),
            lstm_bwd: lstm(o + 3),
            att_w: vars[o + 6],
            att_b: vars[o + 7],
            dense_w: vars[o + 8],
            dense_b: vars[o + 9],
        })
    }
}

/// Nodes of interest produced by [`ModelParams::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, n_classes]` pre-softmax scores.
    pub logits: Var,
    pub probs: Var,
    /// `[B, T]`
    pub alpha: Var,
    /// Activated output of the last convolution, `[B*T, C, h, w]`.
    pub last_conv: Var,
    /// `[B, T, C]`
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub probs: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Element> Prediction<T> {
    pub fn class(&self) -> usize {
        argmax_lower_tie(&self.probs)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lower_tie<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Element> ModelParams<T> {
    /// Fan-in scaled normal init for convolution and dense weights, uniform
    /// `±1/sqrt(H)` for the recurrent matrices, forget-gate bias 1.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let mut convs = Vec::with_capacity(arch.n_convs());
        for i in 0..arch.n_convs() {
            let c_in = if i == 0 { 1 } else { arch.channels };
            let fan_in = (c_in * k * k) as f64;
            convs.push(ConvLayer {
                kernel: normal_tensor(&[arch.channels, c_in, k, k], (2.0 / fan_in).sqrt(), &mut rng),
                bias: Tensor::zeros(&[arch.channels]),
            });
        }
        let h = arch.lstm_hidden;
        let lstm_fwd = LstmCellParams::init(arch.channels, h, &mut rng);
        let lstm_bwd = LstmCellParams::init(arch.channels, h, &mut rng);
        let attention = AttentionParams::init(2 * h, &mut rng);
        let dense_w = normal_tensor(&[arch.n_classes, 2 * h], (1.0 / (2 * h) as f64).sqrt(), &mut rng);
        let dense_b = Tensor::zeros(&[arch.n_classes]);
        Ok(ModelParams {
            arch,
            input_scale: 1.0,
            convs,
            lstm_fwd,
            lstm_bwd,
            attention,
            dense_w,
            dense_b,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let cpb = self.arch.convs_per_block;
        for i in 0..self.convs.len() {
            let (b, j) = (i / cpb, i % cpb);
            names.push(format!("block{b}.conv{j}.kernel"));
            names.push(format!("block{b}.conv{j}.bias"));
        }
        for dir in ["lstm_fwd", "lstm_bwd"] {
            for part in ["w_x", "w_h", "b"] {
                names.push(format!("{dir}.{part}"));
            }
        }
        for n in ["attention.w", "attention.b", "dense.w", "dense.b"] {
            names.push(n.to_string());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.convs.iter().flat_map(|c| [&c.kernel, &c.bias]).collect();
        for l in [&self.lstm_fwd, &self.lstm_bwd] {
            v.extend([&l.w_x, &l.w_h, &l.b]);
        }
        v.extend([&self.attention.w, &self.attention.b, &self.dense_w, &self.dense_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.kernel, &mut c.bias])
            .collect();
        for l in [&mut self.lstm_fwd, &mut self.lstm_bwd] {
            v.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
        }
        v.extend([
            &mut self.attention.w,
            &mut self.attention.b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]);
        v
    }

    /// Expected shapes, in [`Self::names`] order.
    pub fn expected_shapes(arch: &ArchConfig) -> Vec<Vec<usize>> {
        let (c, k, h, n) = (arch.channels, arch.kernel, arch.lstm_hidden, arch.n_classes);
        let mut s = Vec::new();
        for i in 0..arch.n_convs() {
            let c_in = if i == 0 { 1 } else { c };
            s.push(vec![c, c_in, k, k]);
            s.push(vec![c]);
        }
        for _ in 0..2 {
            s.push(vec![4 * h, c]);
            s.push(vec![4 * h, h]);
            s.push(vec![4 * h]);
        }
        s.push(vec![1, 2 * h]);
        s.push(vec![1]);
        s.push(vec![n, 2 * h]);
        s.push(vec![n]);
        s
    }

    /// Rebuilds parameters from tensors listed in [`Self::names`] order.
    pub fn from_tensors(arch: ArchConfig, input_scale: f64, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = Self::expected_shapes(&arch);
        if tensors.len() != shapes.len() {
            return Err(Error::Data(format!(
                "expected {} tensors for this architecture, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Data(format!(
                    "tensor #{i} has shape {:?}, architecture expects {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let convs = (0..arch.n_convs())
            .map(|_| ConvLayer {
                kernel: next(),
                bias: next(),
            })
            .collect();
        let mut lstm = || LstmCellParams {
            w_x: next(),
            w_h: next(),
            b: next(),
        };
        let lstm_fwd = lstm();
        let lstm_bwd = lstm();
        let attention = AttentionParams { w: next(), b: next() };
        let dense_w = next();
        let dense_b = next();
        Ok(ModelParams {
            arch,
            input_scale,
            convs,
            lstm_fwd,
            lstm_bwd,
            attention,
            dense_w,
            dense_b,
        })
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams::from_tensors(
            self.arch.clone(),
            self.input_scale,
            self.tensors().into_iter().map(|t| t.cast()).collect(),
        )
        .expect("shapes already consistent")
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        let convs = self
            .convs
            .iter()
            .map(|c| (leaf(g, &c.kernel), leaf(g, &c.bias)))
            .collect();
        let lstm_fwd = self.lstm_fwd.register(g, trainable);
        let lstm_bwd = self.lstm_bwd.register(g, trainable);
        ParamVars {
            convs,
            lstm_fwd,
            lstm_bwd,
            att_w: leaf(g, &self.attention.w),
            att_b: leaf(g, &self.attention.b),
            dense_w: leaf(g, &self.dense_w),
            dense_b: leaf(g, &self.dense_b),
        }
    }

    fn check_frames(&self, shape: &[usize], want_t: Option<usize>) -> Result<(usize, usize)> {
        let [h, w] = self.arch.input_hw;
        match *shape {
            [b, t, 1, fh, fw] if fh == h && fw == w => {
                if let Some(want) = want_t {
                    if t != want {
                        return Err(Error::dim(format!(
                            "epoch has {t} frames, model expects {want}"
                        )));
                    }
                }
                Ok((b, t))
            }
            _ => Err(Error::dim(format!(
                "frames must be [B,T,1,{h},{w}], got {shape:?}"
            ))),
        }
    }

    /// Time-distributed CNN on `[N,1,H,W]` frames; returns `(features [N,C], last_conv)`.
    fn cnn_graph(&self, g: &mut Graph<T>, vars: &ParamVars, frames: Var) -> Result<(Var, Var)> {
        let mut x = frames;
        let mut last_conv = x;
        let cpb = self.arch.convs_per_block;
        for block in 0..self.arch.n_conv_blocks {
            for j in 0..cpb {
                let (k, b) = vars.convs[block * cpb + j];
                x = g.conv2d(x, k, b, Padding::Same)?;
                x = g.leaky_relu(x, self.arch.leaky_slope)?;
                last_conv = x;
            }
            x = g.max_pool2d(x)?;
        }
        Ok((g.global_avg_pool(x)?, last_conv))
    }

    /// Builds the full forward pass for a batch `[B,T,1,H,W]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &ParamVars, frames: Tensor<T>) -> Result<ForwardVars> {
        let (b, t) = self.check_frames(frames.shape(), Some(self.arch.frames_per_epoch))?;
        self.forward_graph_any_len(g, vars, frames, b, t, false)
    }

    /// Like [`Self::forward_graph`] for any number of frames, with the input
    /// marked differentiable so that every activation receives a gradient.
    pub fn forward_graph_input_grad(&self, g: &mut Graph<T>, vars: &ParamVars, frames: Tensor<T>) -> Result<ForwardVars> {
        let (b, t) = self.check_frames(frames.shape(), None)?;
        self.forward_graph_any_len(g, vars, frames, b, t, true)
    }

    fn forward_graph_any_len(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        frames: Tensor<T>,
        b: usize,
        t: usize,
        input_grad: bool,
    ) -> Result<ForwardVars> {
        let [h, w] = self.arch.input_hw;
        let mut frames = frames.reshape(&[b * t, 1, h, w])?;
        if self.input_scale != 1.0 {
            let s = T::from_f64_lossy(self.input_scale);
            frames.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        let x = if input_grad { g.param(frames) } else { g.input(frames) };
        let (feat, last_conv) = self.cnn_graph(g, vars, x)?;
        let features = g.reshape(feat, &[b, t, self.arch.channels])?;
        let hseq = bilstm_graph(g, features, &vars.lstm_fwd, &vars.lstm_bwd)?;
        let (alpha, ctx) = additive_attention_graph(g, hseq, vars.att_w, vars.att_b)?;
        let (logits, probs) = softmax_dense_graph(g, ctx, vars.dense_w, vars.dense_b)?;
        Ok(ForwardVars {
            logits,
            probs,
            alpha,
            last_conv,
            features,
        })
    }

    /// Spatial feature vector of a single `[1,H,W]` frame.
    pub fn frame_features(&self, frame: &Tensor<T>) -> Result<Vec<T>> {
        let [h, w] = self.arch.input_hw;
        if frame.shape() != [1, h, w] {
            return Err(Error::dim(format!(
                "frame must be [1,{h},{w}], got {:?}",
                frame.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let mut f = frame.clone().reshape(&[1, 1, h, w])?;
        if self.input_scale != 1.0 {
            let s = T::from_f64_lossy(self.input_scale);
            f.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        let x = g.input(f);
        let (feat, _) = self.cnn_graph(&mut g, &vars, x)?;
        Ok(g.value(feat).data().to_vec())
    }

    /// Class probabilities and attention weights for one `[T,1,H,W]` epoch.
    pub fn forward(&self, epoch: &Tensor<T>) -> Result<Prediction<T>> {
        Ok(self.forward_batch(&[epoch])?.remove(0))
    }

    /// Like [`Self::forward`] but accepts any number of frames.
    pub fn forward_any_len(&self, epoch: &Tensor<T>) -> Result<Prediction<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(epoch.shape());
        let (b, t) = self.check_frames(&shape, None)?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_graph_any_len(&mut g, &vars, epoch.clone().reshape(&shape)?, b, t, false)?;
        let probs = g.value(out.probs).data().to_vec();
        let alpha = g.value(out.alpha).data().to_vec();
        check_finite(&probs, &alpha)?;
        Ok(Prediction { probs, alpha })
    }

    pub fn forward_batch(&self, epochs: &[&Tensor<T>]) -> Result<Vec<Prediction<T>>> {
        if epochs.is_empty() {
            return Ok(Vec::new());
        }
        let frames = stack_epochs(epochs)?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, frames)?;
        let nc = self.arch.n_classes;
        let t = g.value(out.alpha).shape()[1];
        let probs = g.value(out.probs).data();
        let alpha = g.value(out.alpha).data();
        let mut preds = Vec::with_capacity(epochs.len());
        for i in 0..epochs.len() {
            let p = probs[i * nc..(i + 1) * nc].to_vec();
            let a = alpha[i * t..(i + 1) * t].to_vec();
            check_finite(&p, &a)?;
            preds.push(Prediction { probs: p, alpha: a });
        }
        Ok(preds)
    }

    pub fn predict(&self, epoch: &Tensor<T>) -> Result<usize> {
        Ok(self.forward(epoch)?.class())
    }
}

fn check_finite<T: Element>(probs: &[T], alpha: &[T]) -> Result<()> {
    if probs.iter().chain(alpha).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite network output".into()))
    }
}

/// Stacks `[T,1,H,W]` epochs into a `[B,T,1,H,W]` batch.
pub fn stack_epochs<T: Element>(epochs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::dim("cannot stack an empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * epochs.len());
    for e in epochs {
        if e.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "epoch shapes differ in batch: {:?} vs {shape:?}",
                e.shape()
            )));
        }
        data.extend_from_slice(e.data());
    }
    let mut full = vec![epochs.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}
