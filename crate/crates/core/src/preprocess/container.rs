//! On-disk recording directories.
//!
//! A directory holds `meta.json`, `frames.bin` (row-major little-endian
//! `[T, C, H, W]` samples of the declared dtype, dark frames included at the
//! declared range) and `mask.bin` (`H * W` bytes, nonzero = brain).
//! Preprocessed output uses the same layout with a single `dff` channel in
//! `f32` plus `provenance.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Channel, Landmarks, Mask, PreprocessedStack, ProvenanceStep, RecordingStack};
use crate::compute::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    U16,
    F32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    recording_id: String,
    /// `[T, C, H, W]`, dark frames included.
    shape: [usize; 4],
    channels: Vec<Channel>,
    dtype: RawDtype,
    frame_rate_hz: f64,
    #[serde(default)]
    landmarks: Option<Landmarks>,
    /// Half-open frame range `[start, end)` of non-illuminated frames.
    #[serde(default)]
    dark_frames: Option<[usize; 2]>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode(bytes: &[u8], dtype: RawDtype, n: usize, path: &Path) -> Result<Vec<f64>> {
    let width = match dtype {
        RawDtype::U16 => 2,
        RawDtype::F32 => 4,
    };
    if bytes.len() != n * width {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for {n} {dtype:?} samples, found {}",
            path.display(),
            n * width,
            bytes.len()
        )));
    }
    Ok(match dtype {
        RawDtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        RawDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    })
}

fn encode(values: impl Iterator<Item = f64>, dtype: RawDtype, out: &mut Vec<u8>) {
    match dtype {
        RawDtype::U16 => values.for_each(|v| out.extend_from_slice(&(v.round().clamp(0.0, 65535.0) as u16).to_le_bytes())),
        RawDtype::F32 => values.for_each(|v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
}

fn read_mask(path: &Path, h: usize, w: usize) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w {
        return Err(Error::Data(format!(
            "{}: expected {} mask bytes, found {}",
            path.display(),
            h * w,
            bytes.len()
        )));
    }
    Mask::new(h, w, bytes.iter().map(|&b| b != 0).collect())
}

fn mask_bytes(mask: &Mask) -> Vec<u8> {
    mask.data.iter().map(|&b| b as u8).collect()
}

pub fn read_raw(dir: &Path) -> Result<RecordingStack> {
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let [t, c, h, w] = meta.shape;
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("{}: zero extent in shape {:?}", dir.display(), meta.shape)));
    }
    if meta.channels.len() != c {
        return Err(Error::Data(format!(
            "{}: {} channel names for {c} channels",
            dir.display(),
            meta.channels.len()
        )));
    }
    let fpath = dir.join("frames.bin");
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    let all = decode(&bytes, meta.dtype, t * c * h * w, &fpath)?;
    let frame = c * h * w;
    let (frames, dark) = match meta.dark_frames {
        Some([s, e]) => {
            if s >= e || e > t || (s != 0 && e != t) {
                return Err(Error::Data(format!(
                    "{}: dark frame range [{s}, {e}) must be non-empty and sit at the start or end of {t} frames",
                    dir.display()
                )));
            }
            let dark = all[s * frame..e * frame].to_vec();
            let mut rest = all[..s * frame].to_vec();
            rest.extend_from_slice(&all[e * frame..]);
            let nt = t - (e - s);
            if nt == 0 {
                return Err(Error::Data(format!("{}: only dark frames present", dir.display())));
            }
            (
                Tensor::new(&[nt, c, h, w], rest)?,
                Some(Tensor::new(&[e - s, c, h, w], dark)?),
            )
        }
        None => (Tensor::new(&[t, c, h, w], all)?, None),
    };
    let mask = read_mask(&dir.join("mask.bin"), h, w)?;
    let stack = RecordingStack {
        recording_id: meta.recording_id,
        frames,
        channels: meta.channels,
        frame_rate_hz: meta.frame_rate_hz,
        dark_frames: dark,
        landmarks: meta.landmarks.unwrap_or_else(|| Landmarks::atlas_default(h, w)),
        mask,
    };
    stack.validate()?;
    Ok(stack)
}

/// Writes a raw recording; dark frames, if any, are stored first.
pub fn write_raw(dir: &Path, stack: &RecordingStack, dtype: RawDtype) -> Result<()> {
    stack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = stack.frames.shape();
    let n_dark = stack.dark_frames.as_ref().map_or(0, |d| d.shape()[0]);
    let meta = Meta {
        recording_id: stack.recording_id.clone(),
        shape: [s[0] + n_dark, s[1], s[2], s[3]],
        channels: stack.channels.clone(),
        dtype,
        frame_rate_hz: stack.frame_rate_hz,
        landmarks: Some(stack.landmarks),
        dark_frames: (n_dark > 0).then_some([0, n_dark]),
    };
    let mut bytes = Vec::new();
    if let Some(d) = &stack.dark_frames {
        encode(d.data().iter().copied(), dtype, &mut bytes);
    }
    encode(stack.frames.data().iter().copied(), dtype, &mut bytes);
    write_bytes(&dir.join("frames.bin"), &bytes)?;
    write_bytes(&dir.join("mask.bin"), &mask_bytes(&stack.mask))?;
    write_bytes(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)
}

pub fn write_preprocessed(dir: &Path, stack: &PreprocessedStack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = stack.hw();
    let meta = Meta {
        recording_id: stack.recording_id.clone(),
        shape: [stack.n_frames(), 1, h, w],
        channels: vec![Channel::Dff],
        dtype: RawDtype::F32,
        frame_rate_hz: stack.frame_rate_hz,
        landmarks: None,
        dark_frames: None,
    };
    let mut bytes = Vec::with_capacity(4 * stack.frames.len());
    for v in stack.frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&dir.join("frames.bin"), &bytes)?;
    write_bytes(&dir.join("mask.bin"), &mask_bytes(&stack.mask))?;
    write_bytes(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    write_bytes(
        &dir.join("provenance.json"),
        &serde_json::to_vec_pretty(&stack.provenance)?,
    )
}

pub fn read_preprocessed(dir: &Path) -> Result<PreprocessedStack> {
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let [t, c, h, w] = meta.shape;
    if c != 1 || meta.channels != [Channel::Dff] || meta.dtype != RawDtype::F32 {
        return Err(Error::Data(format!(
            "{}: not a preprocessed stack (expected one f32 dff channel)",
            dir.display()
        )));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("{}: zero extent in shape", dir.display())));
    }
    let fpath = dir.join("frames.bin");
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    if bytes.len() != 4 * t * h * w {
        return Err(Error::Data(format!("{}: frame payload size mismatch", fpath.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mask = read_mask(&dir.join("mask.bin"), h, w)?;
    let ppath = dir.join("provenance.json");
    let provenance: Vec<ProvenanceStep> = if ppath.exists() {
        read_json(&ppath)?
    } else {
        Vec::new()
    };
    Ok(PreprocessedStack {
        recording_id: meta.recording_id,
        frames: Tensor::new(&[t, h, w], data)?,
        mask,
        frame_rate_hz: meta.frame_rate_hz,
        provenance,
    })
}
