//! One-segment-per-epoch Welch spectra and band powers.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::SleepState;
use crate::error::{Error, Result};

/// Inclusive frequency band in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

pub const DELTA: Band = Band { lo: 0.4, hi: 4.0 };
pub const THETA: Band = Band { lo: 6.0, hi: 8.0 };

const EDGE_TOL: f64 = 1e-9;

impl Band {
    pub fn contains(&self, f: f64) -> bool {
        f >= self.lo - EDGE_TOL && f <= self.hi + EDGE_TOL
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided power spectral density of a single Hann-windowed segment after
/// removing its mean. Returns `(frequencies, density)` with `n/2 + 1` bins.
pub fn periodogram(x: &[f64], fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Domain("periodogram needs at least 2 samples".into()));
    }
    if !(fs > 0.0) {
        return Err(Error::Domain(format!("sampling rate {fs} must be > 0")));
    }
    let w = hann(n);
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .zip(&w)
        .map(|(v, wv)| Complex::new((v - mean) * wv, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (fs * w.iter().map(|v| v * v).sum::<f64>());
    let nb = n / 2 + 1;
    let mut psd: Vec<f64> = buf[..nb].iter().map(|c| c.norm_sqr() * scale).collect();
    let last = if n % 2 == 0 { nb - 1 } else { nb };
    for p in &mut psd[1..last] {
        *p *= 2.0;
    }
    let freqs = (0..nb).map(|k| k as f64 * fs / n as f64).collect();
    Ok((freqs, psd))
}

/// Integral of the density over `band` (rectangle rule, edge bins included).
pub fn band_power(freqs: &[f64], psd: &[f64], band: Band) -> f64 {
    let df = if freqs.len() > 1 { freqs[1] - freqs[0] } else { 0.0 };
    freqs
        .iter()
        .zip(psd)
        .filter(|(f, _)| band.contains(**f))
        .map(|(_, p)| p * df)
        .sum()
}

pub fn total_power(freqs: &[f64], psd: &[f64]) -> f64 {
    let df = if freqs.len() > 1 { freqs[1] - freqs[0] } else { 0.0 };
    psd.iter().sum::<f64>() * df
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpectrum {
    pub n_segments: usize,
    pub psd: Vec<f64>,
    pub delta: f64,
    pub theta: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPowerReport {
    pub freqs: Vec<f64>,
    pub delta_band: Band,
    pub theta_band: Band,
    /// Indexed by class; `None` when no epoch was assigned that state.
    pub states: [Option<StateSpectrum>; 3],
}

/// Averages per-epoch periodograms of the global trace within each state.
///
/// `traces` holds one `(trace, states)` pair per recording; epoch `i` covers
/// samples `[i * frames_per_epoch, (i + 1) * frames_per_epoch)`.
pub fn band_power_by_state(
    traces: &[(Vec<f64>, Vec<SleepState>)],
    frames_per_epoch: usize,
    fs: f64,
) -> Result<BandPowerReport> {
    let nb = frames_per_epoch / 2 + 1;
    let mut sums = vec![vec![0.0; nb]; 3];
    let mut counts = [0usize; 3];
    let mut freqs = Vec::new();
    for (trace, states) in traces {
        for (i, s) in states.iter().enumerate() {
            let (a, b) = (i * frames_per_epoch, (i + 1) * frames_per_epoch);
            if b > trace.len() {
                return Err(Error::dim(format!(
                    "epoch {i} runs past the end of a {}-sample trace",
                    trace.len()
                )));
            }
            let (f, p) = periodogram(&trace[a..b], fs)?;
            freqs = f;
            for (acc, v) in sums[s.index()].iter_mut().zip(p) {
                *acc += v;
            }
            counts[s.index()] += 1;
        }
    }
    if freqs.is_empty() {
        freqs = (0..nb).map(|k| k as f64 * fs / frames_per_epoch as f64).collect();
    }
    let states = std::array::from_fn(|c| {
        (counts[c] > 0).then(|| {
            let psd: Vec<f64> = sums[c].iter().map(|v| v / counts[c] as f64).collect();
            StateSpectrum {
                n_segments: counts[c],
                delta: band_power(&freqs, &psd, DELTA),
                theta: band_power(&freqs, &psd, THETA),
                total: total_power(&freqs, &psd),
                psd,
            }
        })
    });
    Ok(BandPowerReport {
        freqs,
        delta_band: DELTA,
        theta_band: THETA,
        states,
    })
}
