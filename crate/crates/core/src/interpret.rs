//! Grad-CAM saliency on the last convolution and attention-weight extraction.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Tensor};
use crate::dataset::{Epoch, SleepState};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub target: SleepState,
    pub h: usize,
    pub w: usize,
    /// Rectified per-frame maps at input resolution, before normalization.
    pub frames: Vec<Vec<f64>>,
    /// Temporal mean of `frames`, min-max normalized to `[0, 1]`.
    pub map: Vec<f64>,
    /// The averaged map was identically zero; `map` is left at 0.
    pub zero: bool,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(src: &[f64], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    for r in 0..h {
        let (y0, y1, fy) = coord(r, h, sh);
        for c in 0..w {
            let (x0, x1, fx) = coord(c, w, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[r * w + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Core Grad-CAM on a `[T, C, h, w]` activation block and the logit
/// gradient with respect to it. Returns rectified coarse maps per frame.
pub fn cam_from_activations(acts: &[f64], grads: &[f64], t: usize, c: usize, hw: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|ti| {
            let mut m = vec![0.0; hw];
            for k in 0..c {
                let base = (ti * c + k) * hw;
                let a_k = grads[base..base + hw].iter().sum::<f64>() / hw as f64;
                for (mv, av) in m.iter_mut().zip(&acts[base..base + hw]) {
                    *mv += a_k * av;
                }
            }
            m.iter_mut().for_each(|v| *v = v.max(0.0));
            m
        })
        .collect()
}

/// Gradient-weighted class activation map of `target` for one epoch.
pub fn grad_cam(params: &ModelParams<f32>, epoch: &Tensor<f32>, target: SleepState) -> Result<SaliencyMap> {
    let mut shape = vec![1];
    shape.extend_from_slice(epoch.shape());
    let [h, w] = params.arch.input_hw;
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let out = params.forward_graph_input_grad(&mut g, &vars, epoch.clone().reshape(&shape)?)?;
    let nc = params.arch.n_classes;
    let mut seed = Tensor::zeros(&[1, nc]);
    seed.data_mut()[target.index()] = 1.0;
    let grads = g.backward_with_seed(out.logits, seed)?;
    let acts = g.value(out.last_conv);
    let d = grads
        .get(out.last_conv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(acts.shape()));
    let s = acts.shape().to_vec();
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let a64: Vec<f64> = acts.data().iter().map(|&v| v as f64).collect();
    let g64: Vec<f64> = d.data().iter().map(|&v| v as f64).collect();
    let coarse = cam_from_activations(&a64, &g64, t, c, hw);
    let frames: Vec<Vec<f64>> = coarse.iter().map(|m| upsample_bilinear(m, s[2], s[3], h, w)).collect();
    let mut mean = vec![0.0; h * w];
    for f in &frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / t as f64;
        }
    }
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let zero = hi <= 0.0;
    let map = if zero {
        vec![0.0; h * w]
    } else if hi > lo {
        mean.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; h * w]
    };
    Ok(SaliencyMap {
        target,
        h,
        w,
        frames,
        map,
        zero,
    })
}

/// Fraction of the top-decile saliency mass that lies inside the rectangle
/// `rows × cols` of the map.
pub fn top_decile_mass_in(map: &SaliencyMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let mut sorted = map.map.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (sorted.len() as f64 * 0.1).ceil().max(1.0) as usize;
    let thresh = sorted[k - 1];
    let (mut inside, mut total) = (0.0, 0.0);
    for r in 0..map.h {
        for c in 0..map.w {
            let v = map.map[r * map.w + c];
            if v >= thresh && v > 0.0 {
                total += v;
                if rows.contains(&r) && cols.contains(&c) {
                    inside += v;
                }
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Colour map used for saliency renders (black-red-yellow-white).
fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let r = v.min(1.0);
    let g = (v - 1.0).clamp(0.0, 1.0);
    let b = (v - 2.0).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Data(format!("{}: png encoding failed: {e}", path.display()));
    let mut wr = enc.write_header().map_err(to_err)?;
    wr.write_image_data(data).map_err(to_err)?;
    wr.finish().map_err(to_err)
}

pub(crate) fn write_gray_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, data)
}

/// Writes `<stem>.png` (heat map, nearest-neighbour enlarged to at least
/// 256 px) and `<stem>.f32` (raw little-endian `f32`, row-major `h × w`).
pub fn export_saliency(dir: &Path, stem: &str, map: &SaliencyMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let zoom = (256 / map.w.max(map.h)).max(1);
    let (w, h) = (map.w * zoom, map.h * zoom);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for r in 0..h {
        for c in 0..w {
            rgb.extend(heat(map.map[(r / zoom) * map.w + c / zoom]));
        }
    }
    write_png(&dir.join(format!("{stem}.png")), w, h, png::ColorType::Rgb, &rgb)?;
    let mut raw = Vec::with_capacity(4 * map.map.len());
    for v in &map.map {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let p = dir.join(format!("{stem}.f32"));
    fs::write(&p, raw).map_err(|e| Error::io(&p, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub recording_id: String,
    pub epoch_index: usize,
    pub label: Option<SleepState>,
    pub predicted: SleepState,
    pub duration_s: f64,
    pub alpha: Vec<f64>,
}

impl AttentionTrace {
    /// Shannon entropy of the weights in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.alpha)
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Attention weights of one window, returned verbatim from the forward pass.
pub fn extract_attention(params: &ModelParams<f32>, window: &Epoch) -> Result<AttentionTrace> {
    let pred = params.forward_any_len(&window.frames)?;
    Ok(AttentionTrace {
        recording_id: window.recording_id.clone(),
        epoch_index: window.epoch_index,
        label: window.label,
        predicted: SleepState::from_index(pred.class())?,
        duration_s: window.duration_s,
        alpha: pred.alpha.iter().map(|&v| v as f64).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub state: SleepState,
    pub n: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub mean_entropy: f64,
}

/// Per-timestep mean and standard deviation of the weights, grouped by
/// predicted state. Traces of a different length than the first are rejected.
pub fn aggregate_attention(traces: &[AttentionTrace]) -> Result<Vec<AttentionSummary>> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let t = first.alpha.len();
    if traces.iter().any(|tr| tr.alpha.len() != t) {
        return Err(Error::dim("attention traces differ in length"));
    }
    let mut out = Vec::new();
    for st in SleepState::ALL {
        let group: Vec<&AttentionTrace> = traces.iter().filter(|tr| tr.predicted == st).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let mean: Vec<f64> = (0..t).map(|i| group.iter().map(|g| g.alpha[i]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..t)
            .map(|i| (group.iter().map(|g| (g.alpha[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        out.push(AttentionSummary {
            state: st,
            n: group.len(),
            mean,
            sd,
            mean_entropy: group.iter().map(|g| g.entropy()).sum::<f64>() / n,
        });
    }
    Ok(out)
}

/// CSV rows `recording_id,epoch_index,predicted,timestep,weight`.
pub fn write_attention_csv(path: &Path, traces: &[AttentionTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["recording_id", "epoch_index", "predicted", "timestep", "weight"])?;
    for tr in traces {
        for (i, a) in tr.alpha.iter().enumerate() {
            w.write_record([
                tr.recording_id.clone(),
                tr.epoch_index.to_string(),
                tr.predicted.code().to_string(),
                i.to_string(),
                format!("{a:.9}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_path_toy() {
        // One channel, 2x2 map, logit = activation at pixel 3.
        let acts = [0.0, 0.0, 0.0, 2.0];
        let grads = [0.0, 0.0, 0.0, 1.0];
        let m = cam_from_activations(&acts, &grads, 1, 1, 4);
        assert_eq!(m[0], vec![0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn upsample_constant() {
        let u = upsample_bilinear(&[3.0; 4], 2, 2, 8, 8);
        assert!(u.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
