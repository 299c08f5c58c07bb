//! Raw multi-channel recordings to masked, atlas-registered ΔF/F stacks.
//!
//! The pipeline runs, in this order: dark-frame subtraction, per-pixel
//! linear detrending, global signal regression, ratiometric correction
//! against the green reflectance channel, spatial smoothing, two-landmark
//! registration and brain masking. Intermediate work is done in `f64`.

mod container;
mod register;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use container::{read_preprocessed, read_raw, write_preprocessed, write_raw, RawDtype};
pub use register::{sample_bilinear, warp_frame, warp_mask, Landmarks, Similarity};

use crate::compute::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Blue,
    Green,
    Yellow,
    Red,
    /// Corrected single-channel fluorescence.
    Dff,
}

/// Boolean brain map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![true; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!(
                "mask has {} cells for a {h}x{w} frame",
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    /// Keeps only the left (`true`) or right half, for single-hemisphere input.
    pub fn half(&self, left: bool) -> Self {
        let mut m = self.clone();
        for r in 0..self.h {
            for c in 0..self.w {
                if (c < self.w / 2) != left {
                    m.data[r * self.w + c] = false;
                }
            }
        }
        m
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.count() == 0 {
            Err(Error::Domain("brain mask has no true pixels".into()))
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingStack {
    pub recording_id: String,
    /// `[T, C, H, W]`
    pub frames: Tensor<f64>,
    pub channels: Vec<Channel>,
    pub frame_rate_hz: f64,
    /// `[T_dark, C, H, W]`
    pub dark_frames: Option<Tensor<f64>>,
    pub landmarks: Landmarks,
    pub mask: Mask,
}

impl RecordingStack {
    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("recording frames must be [T,C,H,W], got {s:?}")));
        }
        if s[1] != self.channels.len() {
            return Err(Error::dim(format!(
                "{} channels declared, frames have {}",
                self.channels.len(),
                s[1]
            )));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(Error::Domain(format!("frame rate {} must be > 0", self.frame_rate_hz)));
        }
        if (self.mask.h, self.mask.w) != (s[2], s[3]) {
            return Err(Error::dim("mask shape differs from frame shape"));
        }
        self.mask.ensure_nonempty()?;
        self.landmarks.validate()?;
        if let Some(d) = &self.dark_frames {
            if d.ndim() != 4 || d.shape()[1..] != s[1..] {
                return Err(Error::dim(format!(
                    "dark frames {:?} do not match recording frames {s:?}",
                    d.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    pub fn channel_index(&self, ch: Channel) -> Result<usize> {
        self.channels
            .iter()
            .position(|&c| c == ch)
            .ok_or_else(|| Error::Data(format!("recording has no {ch:?} channel")))
    }

    /// Copies one channel out as `[T, H, W]`.
    pub fn channel(&self, ch: Channel) -> Result<Tensor<f64>> {
        let c = self.channel_index(ch)?;
        let s = self.frames.shape();
        let (t, nc, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(t * hw);
        for ti in 0..t {
            let base = (ti * nc + c) * hw;
            out.extend_from_slice(&self.frames.data()[base..base + hw]);
        }
        Tensor::new(&[t, s[2], s[3]], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceStep {
    pub step: String,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedStack {
    pub recording_id: String,
    /// `[T, H, W]`
    pub frames: Tensor<f32>,
    pub mask: Mask,
    pub frame_rate_hz: f64,
    pub provenance: Vec<ProvenanceStep>,
}

impl PreprocessedStack {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    /// Mean over brain pixels of every frame.
    pub fn global_trace(&self) -> Vec<f64> {
        let n = self.mask.count().max(1) as f64;
        let hw = self.mask.h * self.mask.w;
        (0..self.n_frames())
            .map(|t| {
                let f = &self.frames.data()[t * hw..(t + 1) * hw];
                f.iter()
                    .zip(&self.mask.data)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v as f64)
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    Gaussian,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    pub kind: SmoothKind,
    pub size: usize,
    pub sigma: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            kind: SmoothKind::Gaussian,
            size: 5,
            sigma: 1.2,
        }
    }
}

impl SmoothConfig {
    /// Normalized 1-D factor of the separable 2-D kernel.
    pub fn kernel_1d(&self) -> Result<Vec<f64>> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(Error::config("smoothing.size", "kernel size must be odd"));
        }
        let r = (self.size / 2) as f64;
        let k: Vec<f64> = match self.kind {
            SmoothKind::Box => vec![1.0; self.size],
            SmoothKind::Gaussian => {
                if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                    return Err(Error::config("smoothing.sigma", "sigma must be > 0"));
                }
                (0..self.size)
                    .map(|i| {
                        let x = i as f64 - r;
                        (-x * x / (2.0 * self.sigma * self.sigma)).exp()
                    })
                    .collect()
            }
        };
        let s: f64 = k.iter().sum();
        Ok(k.into_iter().map(|v| v / s).collect())
    }

    pub fn kernel_2d(&self) -> Result<Vec<f64>> {
        let k = self.kernel_1d()?;
        Ok(k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub dark: bool,
    pub detrend: bool,
    pub gsr: bool,
    pub ratiometric: bool,
    pub smooth: bool,
    pub smoothing: SmoothConfig,
    pub register: bool,
    /// Target landmark positions; defaults to [`Landmarks::atlas_default`].
    pub atlas: Option<Landmarks>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            dark: true,
            detrend: true,
            gsr: true,
            ratiometric: true,
            smooth: true,
            smoothing: SmoothConfig::default(),
            register: true,
            atlas: None,
        }
    }
}

impl PreprocessConfig {
    /// Every optional step off; the pipeline then passes the blue channel
    /// through and applies the mask.
    pub fn disabled() -> Self {
        PreprocessConfig {
            dark: false,
            detrend: false,
            gsr: false,
            ratiometric: false,
            smooth: false,
            register: false,
            ..Self::default()
        }
    }
}

fn trace_dims(frames: &Tensor<f64>) -> (usize, usize) {
    let t = frames.shape()[0];
    (t, frames.len() / t)
}

/// Subtracts the per-pixel, per-channel temporal mean of the dark frames.
/// Without dark frames the stack is left unchanged and `false` returned.
pub fn subtract_dark(stack: &mut RecordingStack) -> Result<bool> {
    let Some(dark) = &stack.dark_frames else {
        warn!("{}: no dark frames, skipping dark subtraction", stack.recording_id);
        return Ok(false);
    };
    if dark.ndim() != 4 || dark.shape()[1..] != stack.frames.shape()[1..] {
        return Err(Error::dim(format!(
            "dark frames {:?} do not match recording frames {:?}",
            dark.shape(),
            stack.frames.shape()
        )));
    }
    let mean = temporal_mean(dark);
    let frame = mean.len();
    for f in stack.frames.data_mut().chunks_exact_mut(frame) {
        for (v, m) in f.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(true)
}

/// Per-element mean over the leading axis.
pub fn temporal_mean(frames: &Tensor<f64>) -> Vec<f64> {
    let (t, p) = trace_dims(frames);
    let mut mean = vec![0.0; p];
    for f in frames.data().chunks_exact(p) {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    mean
}

/// Removes each trace's least-squares line over time, keeping its mean.
/// Accepts any `[T, ...]` tensor; every trailing element is a trace.
pub fn detrend(frames: &mut Tensor<f64>) -> Result<()> {
    let (t, p) = trace_dims(frames);
    if t < 3 {
        return Err(Error::Domain(format!("detrending needs >= 3 frames, got {t}")));
    }
    let tbar = (t as f64 - 1.0) / 2.0;
    let stt: f64 = (0..t).map(|i| (i as f64 - tbar).powi(2)).sum();
    let mean = temporal_mean(frames);
    let mut sty = vec![0.0; p];
    for (i, f) in frames.data().chunks_exact(p).enumerate() {
        let dt = i as f64 - tbar;
        for ((s, v), m) in sty.iter_mut().zip(f).zip(&mean) {
            *s += dt * (v - m);
        }
    }
    let slope: Vec<f64> = sty.iter().map(|s| s / stt).collect();
    for (i, f) in frames.data_mut().chunks_exact_mut(p).enumerate() {
        let dt = i as f64 - tbar;
        for (v, b) in f.iter_mut().zip(&slope) {
            *v -= b * dt;
        }
    }
    Ok(())
}

/// Regresses the brain-averaged, mean-centred trace out of every pixel of a
/// `[T, H, W]` stack. Returns `false` (stack unchanged) when the global
/// signal is constant.
pub fn global_signal_regress(frames: &mut Tensor<f64>, mask: &Mask) -> Result<bool> {
    let (t, p) = trace_dims(frames);
    if p != mask.data.len() {
        return Err(Error::dim("mask size differs from frame size"));
    }
    mask.ensure_nonempty()?;
    let mean = temporal_mean(frames);
    let n_brain = mask.count() as f64;
    let g: Vec<f64> = frames
        .data()
        .chunks_exact(p)
        .map(|f| {
            f.iter()
                .zip(&mean)
                .zip(&mask.data)
                .filter(|(_, &m)| m)
                .map(|((v, mu), _)| v - mu)
                .sum::<f64>()
                / n_brain
        })
        .collect();
    let gg: f64 = g.iter().map(|v| v * v).sum();
    if gg == 0.0 || !gg.is_finite() {
        warn!("global signal is constant; skipping regression");
        return Ok(false);
    }
    let mut yg = vec![0.0; p];
    for (f, gv) in frames.data().chunks_exact(p).zip(&g) {
        for ((a, v), mu) in yg.iter_mut().zip(f).zip(&mean) {
            *a += (v - mu) * gv;
        }
    }
    let beta: Vec<f64> = yg.iter().map(|a| a / gg).collect();
    for (f, gv) in frames.data_mut().chunks_exact_mut(p).zip(&g) {
        for (v, b) in f.iter_mut().zip(&beta) {
            *v -= b * gv;
        }
    }
    debug_assert_eq!(t, g.len());
    Ok(true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatiometricReport {
    /// Brain pixels whose blue or green temporal mean was not positive.
    pub flagged_pixels: usize,
    /// Samples where the green reference was zero.
    pub zero_reference_samples: usize,
}

/// `(F_b / mean F_b) / (F_g / mean F_g) - 1` per pixel and frame.
pub fn ratiometric_correct(
    blue: &Tensor<f64>,
    green: &Tensor<f64>,
    mask: &Mask,
) -> Result<(Tensor<f64>, RatiometricReport)> {
    if blue.shape() != green.shape() {
        return Err(Error::dim(format!(
            "blue {:?} and green {:?} stacks differ",
            blue.shape(),
            green.shape()
        )));
    }
    let (_, p) = trace_dims(blue);
    if p != mask.data.len() {
        return Err(Error::dim("mask size differs from frame size"));
    }
    let mb = temporal_mean(blue);
    let mg = temporal_mean(green);
    let mut report = RatiometricReport::default();
    let valid: Vec<bool> = (0..p)
        .map(|i| {
            let ok = mb[i] > 0.0 && mg[i] > 0.0;
            if !ok && mask.data[i] {
                report.flagged_pixels += 1;
            }
            ok
        })
        .collect();
    if report.flagged_pixels > 0 {
        warn!(
            "{} brain pixels have a nonpositive mean and were zeroed",
            report.flagged_pixels
        );
    }
    let mut out = vec![0.0; blue.len()];
    for ((o, b), g) in out
        .chunks_exact_mut(p)
        .zip(blue.data().chunks_exact(p))
        .zip(green.data().chunks_exact(p))
    {
        for i in 0..p {
            if !valid[i] {
                continue;
            }
            if g[i] == 0.0 {
                report.zero_reference_samples += 1;
                continue;
            }
            o[i] = (b[i] * mg[i]) / (mb[i] * g[i]) - 1.0;
        }
    }
    Ok((Tensor::new(blue.shape(), out)?, report))
}

/// Index into `0..n` under half-sample symmetric reflection (`dcba|abcd|dcba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable smoothing of every frame of a `[T, H, W]` stack with
/// reflecting boundaries.
pub fn smooth(frames: &mut Tensor<f64>, cfg: &SmoothConfig) -> Result<()> {
    if frames.ndim() != 3 {
        return Err(Error::dim("smoothing expects [T,H,W]"));
    }
    let k = cfg.kernel_1d()?;
    let r = (k.len() / 2) as isize;
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let mut tmp = vec![0.0; h * w];
    for f in frames.data_mut().chunks_exact_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * f[y * w + reflect(x as isize + j as isize - r, w)];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
                }
                f[y * w + x] = s;
            }
        }
    }
    Ok(())
}

/// Warps a `[T, H, W]` stack and its mask so that `landmarks` land on `atlas`.
pub fn register_to_atlas(
    frames: &Tensor<f64>,
    mask: &Mask,
    landmarks: &Landmarks,
    atlas: &Landmarks,
) -> Result<(Tensor<f64>, Mask, Similarity)> {
    if frames.ndim() != 3 {
        return Err(Error::dim("registration expects [T,H,W]"));
    }
    let t = Similarity::from_landmarks(landmarks, atlas)?;
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let mut out = Vec::with_capacity(frames.len());
    for f in frames.data().chunks_exact(h * w) {
        out.extend(warp_frame(f, h, w, &t));
    }
    let mask = Mask::new(h, w, warp_mask(&mask.data, h, w, &t))?;
    Ok((Tensor::new(frames.shape(), out)?, mask, t))
}

/// Zeroes every non-brain pixel of a `[T, H, W]` stack.
pub fn apply_mask(frames: &mut Tensor<f64>, mask: &Mask) -> Result<()> {
    mask.ensure_nonempty()?;
    let p = mask.data.len();
    if frames.ndim() != 3 || frames.shape()[1] * frames.shape()[2] != p {
        return Err(Error::dim("mask shape differs from frame shape"));
    }
    for f in frames.data_mut().chunks_exact_mut(p) {
        for (v, &m) in f.iter_mut().zip(&mask.data) {
            if !m {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

fn step<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Step {
        step: name,
        source: Box::new(e),
    })
}

/// Runs every enabled step in the fixed order and records provenance.
pub fn run_pipeline(raw: &RecordingStack, cfg: &PreprocessConfig) -> Result<PreprocessedStack> {
    step("validate", raw.validate())?;
    let mut prov = Vec::new();
    let mut stack = raw.clone();
    let mut mask = raw.mask.clone();

    if cfg.dark {
        let applied = step("dark", subtract_dark(&mut stack))?;
        prov.push(ProvenanceStep {
            step: "dark".into(),
            params: json!({ "applied": applied, "n_dark_frames": raw.dark_frames.as_ref().map(|d| d.shape()[0]) }),
        });
    }
    let mut blue = step("select_channels", stack.channel(Channel::Blue))?;
    let mut green = if cfg.ratiometric {
        Some(step("select_channels", stack.channel(Channel::Green))?)
    } else {
        None
    };
    drop(stack);

    if cfg.detrend {
        step("detrend", detrend(&mut blue))?;
        if let Some(g) = green.as_mut() {
            step("detrend", detrend(g))?;
        }
        prov.push(ProvenanceStep {
            step: "detrend".into(),
            params: json!({ "order": 1, "keep_mean": true }),
        });
    }
    if cfg.gsr {
        let mut applied = step("gsr", global_signal_regress(&mut blue, &mask))?;
        if let Some(g) = green.as_mut() {
            applied &= step("gsr", global_signal_regress(g, &mask))?;
        }
        prov.push(ProvenanceStep {
            step: "gsr".into(),
            params: json!({ "applied": applied }),
        });
    }
    let mut dff = match green {
        Some(g) => {
            let (out, report) = step("ratiometric", ratiometric_correct(&blue, &g, &mask))?;
            prov.push(ProvenanceStep {
                step: "ratiometric".into(),
                params: json!({ "reference": "green", "report": report }),
            });
            out
        }
        None => blue,
    };
    if cfg.smooth {
        step("smooth", smooth(&mut dff, &cfg.smoothing))?;
        prov.push(ProvenanceStep {
            step: "smooth".into(),
            params: serde_json::to_value(&cfg.smoothing)?,
        });
    }
    if cfg.register {
        let (h, w) = raw.hw();
        let atlas = cfg.atlas.unwrap_or_else(|| Landmarks::atlas_default(h, w));
        let (out, m, t) = step("register", register_to_atlas(&dff, &mask, &raw.landmarks, &atlas))?;
        dff = out;
        mask = m;
        prov.push(ProvenanceStep {
            step: "register".into(),
            params: json!({
                "atlas": atlas,
                "landmarks": raw.landmarks,
                "scale": t.scale(),
                "rotation_rad": t.rotation_rad(),
                "translation": t.b,
            }),
        });
    }
    step("mask", apply_mask(&mut dff, &mask))?;
    prov.push(ProvenanceStep {
        step: "mask".into(),
        params: json!({ "brain_pixels": mask.count() }),
    });
    if !dff.is_finite() {
        return Err(Error::Step {
            step: "finalize",
            source: Box::new(Error::Numeric("non-finite values in preprocessed stack".into())),
        });
    }
    Ok(PreprocessedStack {
        recording_id: raw.recording_id.clone(),
        frames: dff.cast(),
        mask,
        frame_rate_hz: raw.frame_rate_hz,
        provenance: prov,
    })
}
