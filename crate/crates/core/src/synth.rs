//! Seeded synthetic recordings with known ground truth.
//!
//! The planted ΔF/F signal is a sum of Gaussian spatial blobs, each driven by
//! a band-limited random process whose band and gain depend on the current
//! sleep state. The blue channel carries that signal under a multiplicative
//! hemodynamic factor shared with the green reflectance channel, plus a
//! linear drift, sensor noise and a dark offset.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::dataset::{frames_per_epoch, LabelFile, SleepState};
use crate::error::{Error, Result};
use crate::preprocess::{detrend, temporal_mean, write_raw, Channel, Landmarks, Mask, RawDtype, RecordingStack};

pub const DELTA_BAND: (f64, f64) = (0.4, 4.0);
pub const THETA_BAND: (f64, f64) = (6.0, 8.0);
pub const WAKE_BAND: (f64, f64) = (1.0, 8.0);
const HEMO_BAND: (f64, f64) = (0.02, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Wake broadband posterior, NREM delta anterior, REM coherent theta posterior.
    Standard,
    /// State-specific activity confined to the top-left quadrant; the rest
    /// of the field carries only noise and the hemodynamic confound.
    AnteriorQuadrant,
    /// NREM-like epochs hold a brief central burst, REM-like epochs a weak
    /// theta rhythm spanning the whole epoch, Wake epochs neither.
    AttentionProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub recording_id: String,
    pub height: usize,
    pub width: usize,
    pub frame_rate_hz: f64,
    pub epoch_s: f64,
    pub n_epochs: usize,
    /// Ratio of signal amplitude to noise standard deviation; `None` is noiseless.
    pub snr: Option<f64>,
    /// ΔF/F amplitude of a fully weighted blob.
    pub signal_amplitude: f64,
    /// Peak fractional hemodynamic modulation shared by blue and green.
    pub hemodynamic_amplitude: f64,
    /// Blue-channel linear drift over the whole recording, as a fraction of baseline.
    pub trend: f64,
    pub dark_level: f64,
    pub n_dark_frames: usize,
    pub blue_baseline: f64,
    pub green_baseline: f64,
    /// Mean bout length per state `[wake, nrem, rem]` in seconds.
    pub mean_dwell_s: [f64; 3],
    /// Probability that a NREM bout ends in REM rather than Wake.
    pub nrem_to_rem: f64,
    pub mode: SynthMode,
    /// Recording landmarks; `None` places them at the atlas positions.
    pub landmarks: Option<Landmarks>,
    /// Elliptical brain mask instead of the full frame.
    pub elliptical_mask: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            recording_id: "synth-000".into(),
            height: 32,
            width: 32,
            frame_rate_hz: 16.8,
            epoch_s: 2.0,
            n_epochs: 50,
            snr: Some(5.0),
            signal_amplitude: 0.02,
            hemodynamic_amplitude: 0.1,
            trend: 0.05,
            dark_level: 100.0,
            n_dark_frames: 16,
            blue_baseline: 2000.0,
            green_baseline: 1500.0,
            mean_dwell_s: [47.0, 66.0, 81.0],
            nrem_to_rem: 0.5,
            mode: SynthMode::Standard,
            landmarks: None,
            elliptical_mask: true,
        }
    }
}

impl SynthSpec {
    /// No noise, hemodynamics, drift or dark offset.
    pub fn clean(self) -> Self {
        SynthSpec {
            snr: None,
            hemodynamic_amplitude: 0.0,
            trend: 0.0,
            dark_level: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("height/width", "frames must be at least 2x2"));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(Error::config("frame_rate_hz", "must be > 0"));
        }
        if self.n_epochs == 0 {
            return Err(Error::config("n_epochs", "must be >= 1"));
        }
        frames_per_epoch(self.epoch_s, self.frame_rate_hz).map_err(|e| Error::config("epoch_s", e.to_string()))?;
        if let Some(s) = self.snr {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("snr", "must be > 0 (omit for noiseless data)"));
            }
        }
        if !(0.0..1.0).contains(&self.hemodynamic_amplitude) {
            return Err(Error::config("hemodynamic_amplitude", "must lie in [0, 1)"));
        }
        if self.mean_dwell_s.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config("mean_dwell_s", "dwell times must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.nrem_to_rem) {
            return Err(Error::config("nrem_to_rem", "must lie in [0, 1]"));
        }
        if !(self.blue_baseline > 0.0 && self.green_baseline > 0.0) {
            return Err(Error::config("baseline", "baselines must be > 0"));
        }
        Ok(())
    }

    pub fn frames_per_epoch(&self) -> usize {
        frames_per_epoch(self.epoch_s, self.frame_rate_hz).expect("validated")
    }
}

/// Planted components, emitted next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    pub states: Vec<SleepState>,
    /// Global hemodynamic factor `h(t)`; pixel `p` sees `h(t) * hemo_gain[p]`.
    pub hemodynamic: Vec<f64>,
    pub hemo_gain: Vec<f64>,
    /// Planted ΔF/F, `[T, H, W]`.
    #[serde(skip)]
    pub signal: Option<Tensor<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub stack: RecordingStack,
    pub labels: LabelFile,
    pub truth: Truth,
}

/// Unit-RMS noise band-passed to `[lo, hi]` Hz by zeroing FFT bins.
pub fn bandlimited<R: Rng>(n: usize, fs: f64, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Per-epoch Markov chain: Wake -> NREM, NREM -> REM or Wake, REM -> Wake.
pub fn state_sequence<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<SleepState> {
    let mut s = match rng.random_range(0..3) {
        0 => SleepState::Wake,
        1 => SleepState::Nrem,
        _ => SleepState::Rem,
    };
    let mut out = Vec::with_capacity(spec.n_epochs);
    for _ in 0..spec.n_epochs {
        out.push(s);
        let leave = (spec.epoch_s / spec.mean_dwell_s[s.index()]).min(1.0);
        if rng.random::<f64>() < leave {
            s = match s {
                SleepState::Wake => SleepState::Nrem,
                SleepState::Rem => SleepState::Wake,
                SleepState::Nrem => {
                    if rng.random::<f64>() < spec.nrem_to_rem {
                        SleepState::Rem
                    } else {
                        SleepState::Wake
                    }
                }
            };
        }
    }
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    anterior: bool,
}

impl Blob {
    fn weights(&self, h: usize, w: usize) -> Vec<f64> {
        let mut m = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - self.cy).powi(2) + (c as f64 - self.cx).powi(2);
                m.push((-d2 / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        m
    }
}

fn elliptical_mask(h: usize, w: usize) -> Mask {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            ((r - cy) / ry).powi(2) + ((c - cx) / rx).powi(2) <= 1.0
        })
        .collect();
    Mask { h, w, data }
}

/// Builds the planted `[T, H, W]` ΔF/F signal before detrending.
fn planted_signal(spec: &SynthSpec, states: &[SleepState], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let tpe = spec.frames_per_epoch();
    let n = tpe * states.len();
    let fs = spec.frame_rate_hz;
    let amp = spec.signal_amplitude;
    let hw = h * w;
    let mut sig = vec![0.0; n * hw];

    // Adds `gain(t) * process(t) * blob` into the signal.
    let mut add = |blob: &[f64], proc_: &dyn Fn(usize) -> f64| {
        for t in 0..n {
            let a = amp * proc_(t);
            if a == 0.0 {
                continue;
            }
            for (s, b) in sig[t * hw..(t + 1) * hw].iter_mut().zip(blob) {
                *s += a * b;
            }
        }
    };
    let state_at = |t: usize| states[t / tpe];

    match spec.mode {
        SynthMode::Standard => {
            let mut blobs = Vec::new();
            for (cy, anterior) in [(0.25, true), (0.75, false)] {
                for cx in [0.25, 0.5, 0.75] {
                    blobs.push(Blob {
                        cy: cy * (hf - 1.0),
                        cx: cx * (wf - 1.0),
                        sigma: 0.18 * wf.min(hf),
                        anterior,
                    });
                }
            }
            let rem_shared = bandlimited(n, fs, THETA_BAND.0, THETA_BAND.1, rng);
            for b in &blobs {
                let m = b.weights(h, w);
                let wake = bandlimited(n, fs, WAKE_BAND.0, WAKE_BAND.1, rng);
                let nrem = bandlimited(n, fs, DELTA_BAND.0, DELTA_BAND.1, rng);
                let rem_own = bandlimited(n, fs, THETA_BAND.0, THETA_BAND.1, rng);
                let (gw, gn, gr) = if b.anterior { (0.4, 1.0, 0.2) } else { (1.0, 0.4, 1.0) };
                let rem: &[f64] = if b.anterior { &rem_own } else { &rem_shared };
                add(&m, &|t| match state_at(t) {
                    SleepState::Wake => gw * wake[t],
                    SleepState::Nrem => gn * nrem[t],
                    SleepState::Rem => gr * rem[t],
                });
            }
        }
        SynthMode::AnteriorQuadrant => {
            let sigma = 0.12 * wf.min(hf);
            let centre = |fy: f64, fx: f64| Blob {
                cy: fy * (hf - 1.0),
                cx: fx * (wf - 1.0),
                sigma,
                anterior: fy < 0.5,
            };
            let target = centre(0.25, 0.25).weights(h, w);
            let wake = bandlimited(n, fs, WAKE_BAND.0, WAKE_BAND.1, rng);
            let nrem = bandlimited(n, fs, DELTA_BAND.0, DELTA_BAND.1, rng);
            let rem = bandlimited(n, fs, THETA_BAND.0, THETA_BAND.1, rng);
            add(&target, &|t| match state_at(t) {
                SleepState::Wake => wake[t],
                SleepState::Nrem => nrem[t],
                SleepState::Rem => rem[t],
            });
        }
        SynthMode::AttentionProbe => {
            let m = Blob {
                cy: 0.5 * (hf - 1.0),
                cx: 0.5 * (wf - 1.0),
                sigma: 0.25 * wf.min(hf),
                anterior: false,
            }
            .weights(h, w);
            let rem = bandlimited(n, fs, THETA_BAND.0, THETA_BAND.1, rng);
            // Burst: Gaussian envelope around the epoch centre, width ~ tpe/10.
            let width = (tpe as f64 / 10.0).max(0.75);
            let mid = (tpe as f64 - 1.0) / 2.0;
            add(&m, &|t| match state_at(t) {
                SleepState::Wake => 0.0,
                SleepState::Nrem => {
                    let x = ((t % tpe) as f64 - mid) / width;
                    2.5 * (-0.5 * x * x).exp()
                }
                SleepState::Rem => 0.6 * rem[t],
            });
        }
    }
    sig
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let states = state_sequence(spec, &mut rng);
    let n = spec.frames_per_epoch() * states.len();

    let mut signal = Tensor::new(&[n, h, w], planted_signal(spec, &states, &mut rng))?;
    if n >= 3 {
        detrend(&mut signal)?;
    }
    let mean = temporal_mean(&signal);
    for f in signal.data_mut().chunks_exact_mut(hw) {
        for (v, m) in f.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let hemo: Vec<f64> = if spec.hemodynamic_amplitude > 0.0 {
        let z = bandlimited(n, spec.frame_rate_hz, HEMO_BAND.0, HEMO_BAND.1, &mut rng);
        let peak = z.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        z.iter().map(|v| spec.hemodynamic_amplitude * v / peak).collect()
    } else {
        vec![0.0; n]
    };
    let hemo_gain: Vec<f64> = (0..hw)
        .map(|i| 0.75 + 0.5 * (i / w) as f64 / (h as f64 - 1.0))
        .collect();

    let noise_sd = spec.snr.map(|s| spec.signal_amplitude / s);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let channels = vec![Channel::Blue, Channel::Green, Channel::Yellow, Channel::Red];
    let baselines = [spec.blue_baseline, spec.green_baseline, 0.8 * spec.green_baseline, 1.2 * spec.green_baseline];
    let nc = channels.len();
    let mut frames = vec![0.0; n * nc * hw];
    for t in 0..n {
        let drift = spec.trend * (t as f64 / n as f64 - 0.5);
        for (c, &base) in baselines.iter().enumerate() {
            let out = &mut frames[(t * nc + c) * hw..(t * nc + c + 1) * hw];
            for (p, o) in out.iter_mut().enumerate() {
                let hemo_f = 1.0 + hemo[t] * hemo_gain[p];
                let neural = if c == 0 { 1.0 + signal.data()[t * hw + p] } else { 1.0 };
                let mut v = base * neural * hemo_f;
                if c == 0 {
                    v += base * drift;
                }
                if let Some(sd) = noise_sd {
                    v += base * sd * normal.sample(&mut rng);
                }
                *o = v + spec.dark_level;
            }
        }
    }
    let dark_frames = if spec.n_dark_frames > 0 {
        let mut d = vec![spec.dark_level; spec.n_dark_frames * nc * hw];
        if noise_sd.is_some() {
            d.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Some(Tensor::new(&[spec.n_dark_frames, nc, h, w], d)?)
    } else {
        None
    };
    let mask = if spec.elliptical_mask {
        elliptical_mask(h, w)
    } else {
        Mask::full(h, w)
    };
    let stack = RecordingStack {
        recording_id: spec.recording_id.clone(),
        frames: Tensor::new(&[n, nc, h, w], frames)?,
        channels,
        frame_rate_hz: spec.frame_rate_hz,
        dark_frames,
        landmarks: spec.landmarks.unwrap_or_else(|| Landmarks::atlas_default(h, w)),
        mask,
    };
    Ok(SynthOutput {
        labels: LabelFile::from_sequence(&spec.recording_id, &states),
        truth: Truth {
            spec: spec.clone(),
            states,
            hemodynamic: hemo,
            hemo_gain,
            signal: Some(signal),
        },
        stack,
    })
}

/// `count` recordings with seeds `seed, seed+1, ...` and ids `synth-000, ...`.
pub fn generate_many(spec: &SynthSpec, count: usize) -> Result<Vec<SynthOutput>> {
    (0..count)
        .map(|i| {
            generate(&SynthSpec {
                seed: spec.seed.wrapping_add(i as u64),
                recording_id: format!("synth-{i:03}"),
                ..spec.clone()
            })
        })
        .collect()
}

/// Writes the raw container plus `labels.csv`, `truth.json` and the planted
/// signal as little-endian `f32` in `signal.bin`.
pub fn write_synth(dir: &Path, out: &SynthOutput) -> Result<()> {
    write_raw(dir, &out.stack, RawDtype::F32)?;
    out.labels.write(&dir.join("labels.csv"))?;
    let tpath = dir.join("truth.json");
    fs::write(&tpath, serde_json::to_vec_pretty(&out.truth)?).map_err(|e| Error::io(&tpath, e))?;
    if let Some(sig) = &out.truth.signal {
        let mut bytes = Vec::with_capacity(4 * sig.len());
        for v in sig.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let spath = dir.join("signal.bin");
        fs::write(&spath, bytes).map_err(|e| Error::io(&spath, e))?;
    }
    Ok(())
}
