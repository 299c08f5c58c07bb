//! Epoching, labels, splits and context windows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessedStack;

/// Class indices are fixed: Wake 0, NREM 1, REM 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepState {
    #[serde(rename = "W")]
    Wake,
    #[serde(rename = "N")]
    Nrem,
    #[serde(rename = "R")]
    Rem,
}

impl SleepState {
    pub const ALL: [SleepState; 3] = [SleepState::Wake, SleepState::Nrem, SleepState::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Domain(format!("class index {i} outside 0..3")))
    }

    pub fn code(self) -> char {
        ['W', 'N', 'R'][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["wake", "nrem", "rem"][self.index()]
    }
}

impl fmt::Display for SleepState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for SleepState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "W" | "w" | "Wake" | "wake" => Ok(SleepState::Wake),
            "N" | "n" | "NREM" | "nrem" => Ok(SleepState::Nrem),
            "R" | "r" | "REM" | "rem" => Ok(SleepState::Rem),
            other => Err(Error::Data(format!("unknown sleep state label `{other}`"))),
        }
    }
}

/// `round(duration * rate)`.
pub fn frames_per_epoch(duration_s: f64, frame_rate_hz: f64) -> Result<usize> {
    let t = (duration_s * frame_rate_hz).round();
    if !(t >= 1.0 && t.is_finite()) {
        return Err(Error::Domain(format!(
            "epoch of {duration_s} s at {frame_rate_hz} Hz has no frames"
        )));
    }
    Ok(t as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    /// `[T, 1, H, W]`
    pub frames: Tensor<f32>,
    pub label: Option<SleepState>,
    pub recording_id: String,
    pub epoch_index: usize,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
}

impl Epoch {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub recording_id: String,
    pub epoch_index: usize,
    pub label: SleepState,
}

/// CSV with header `recording_id,epoch_index,label`; labels are `W`, `N`, `R`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelFile {
    pub rows: Vec<LabelRow>,
}

impl LabelFile {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
        let mut rows = Vec::new();
        for r in rdr.deserialize() {
            let row: LabelRow = r.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        Ok(LabelFile { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn from_sequence(recording_id: &str, states: &[SleepState]) -> Self {
        LabelFile {
            rows: states
                .iter()
                .enumerate()
                .map(|(i, &label)| LabelRow {
                    recording_id: recording_id.to_string(),
                    epoch_index: i,
                    label,
                })
                .collect(),
        }
    }

    /// Labels of one recording ordered by epoch index.
    pub fn for_recording(&self, recording_id: &str) -> BTreeMap<usize, SleepState> {
        self.rows
            .iter()
            .filter(|r| r.recording_id == recording_id)
            .map(|r| (r.epoch_index, r.label))
            .collect()
    }

    /// Labels of one recording as a contiguous sequence starting at index 0.
    pub fn sequence(&self, recording_id: &str) -> Result<Vec<SleepState>> {
        let map = self.for_recording(recording_id);
        for (want, got) in map.keys().enumerate() {
            if want != *got {
                return Err(Error::Data(format!(
                    "labels for `{recording_id}` are not contiguous (missing epoch {want})"
                )));
            }
        }
        Ok(map.into_values().collect())
    }

    pub fn extend(&mut self, other: LabelFile) {
        self.rows.extend(other.rows);
    }
}

fn mismatch_report(epochs: usize, labels: &BTreeMap<usize, SleepState>) -> String {
    let have: BTreeSet<usize> = labels.keys().copied().collect();
    let want: BTreeSet<usize> = (0..epochs).collect();
    let missing: Vec<usize> = want.difference(&have).copied().collect();
    let extra: Vec<usize> = have.difference(&want).copied().collect();
    let show = |v: &[usize]| {
        let mut s: Vec<String> = v.iter().take(10).map(|i| i.to_string()).collect();
        if v.len() > 10 {
            s.push(format!("... ({} total)", v.len()));
        }
        s.join(", ")
    };
    format!(
        "{epochs} epochs vs {} labels; missing labels for [{}]; labels without epoch [{}]",
        labels.len(),
        show(&missing),
        show(&extra)
    )
}

fn epoch_from(
    stack: &PreprocessedStack,
    start: usize,
    t: usize,
    index: usize,
    duration_s: f64,
    label: Option<SleepState>,
) -> Result<Epoch> {
    let (h, w) = stack.hw();
    let hw = h * w;
    let data = stack.frames.data()[start * hw..(start + t) * hw].to_vec();
    Ok(Epoch {
        frames: Tensor::new(&[t, 1, h, w], data)?,
        label,
        recording_id: stack.recording_id.clone(),
        epoch_index: index,
        duration_s,
        frame_rate_hz: stack.frame_rate_hz,
    })
}

/// Cuts consecutive non-overlapping epochs, dropping the trailing partial
/// window, and joins labels by `(recording_id, epoch_index)`.
pub fn epoch_stack(
    stack: &PreprocessedStack,
    duration_s: f64,
    labels: &LabelFile,
    require_labels: bool,
) -> Result<Vec<Epoch>> {
    let t = frames_per_epoch(duration_s, stack.frame_rate_hz)?;
    let n = stack.n_frames() / t;
    if n == 0 {
        return Err(Error::Data(format!(
            "`{}` has {} frames, shorter than one {t}-frame epoch",
            stack.recording_id,
            stack.n_frames()
        )));
    }
    let map = labels.for_recording(&stack.recording_id);
    if map.is_empty() && require_labels {
        return Err(Error::LabelMismatch {
            recording_id: stack.recording_id.clone(),
            report: mismatch_report(n, &map),
        });
    }
    if !map.is_empty() && (map.len() != n || map.keys().next_back() != Some(&(n - 1))) {
        return Err(Error::LabelMismatch {
            recording_id: stack.recording_id.clone(),
            report: mismatch_report(n, &map),
        });
    }
    (0..n)
        .map(|i| epoch_from(stack, i * t, t, i, duration_s, map.get(&i).copied()))
        .collect()
}

/// Re-epochs a stack labelled at `base_s` into windows of `duration_s`.
///
/// Shorter windows tile each labelled parent epoch and inherit its label;
/// any remainder inside a parent is dropped. Longer windows run
/// consecutively from frame 0 and take the label of the parent epoch that
/// contains their centre frame.
pub fn reepoch(
    stack: &PreprocessedStack,
    base_s: f64,
    labels: &[SleepState],
    duration_s: f64,
) -> Result<Vec<Epoch>> {
    let rate = stack.frame_rate_hz;
    let tb = frames_per_epoch(base_s, rate)?;
    let t = frames_per_epoch(duration_s, rate)?;
    let n_base = (stack.n_frames() / tb).min(labels.len());
    let mut out = Vec::new();
    if t <= tb {
        let per = tb / t;
        for (p, &label) in labels.iter().enumerate().take(n_base) {
            for j in 0..per {
                let idx = out.len();
                out.push(epoch_from(stack, p * tb + j * t, t, idx, duration_s, Some(label))?);
            }
        }
    } else {
        let covered = n_base * tb;
        let mut start = 0;
        while start + t <= covered {
            let centre = start + t / 2;
            let idx = out.len();
            out.push(epoch_from(stack, start, t, idx, duration_s, Some(labels[centre / tb]))?);
            start += t;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    EpochShuffle,
    ByRecording,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// `(train, val, test)`
    pub fractions: [f64; 3],
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
            mode: SplitMode::EpochShuffle,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("split.fractions", "each fraction must lie in [0, 1]"));
        }
        if (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.fractions", "fractions must sum to 1"));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` units: floors for val and test,
    /// remainder to train.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let val = (n as f64 * self.fractions[1]).floor() as usize;
        let test = (n as f64 * self.fractions[2]).floor() as usize;
        [n - val - test, val, test]
    }
}

/// Indices into the epoch list for each part.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Per-part class counts `[wake, nrem, rem]`.
    pub class_counts: [[usize; 3]; 3],
}

pub fn split(epochs: &[Epoch], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if epochs.len() < 10 {
        return Err(Error::Data(format!(
            "splitting needs at least 10 epochs, got {}",
            epochs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts: [Vec<usize>; 3] = match spec.mode {
        SplitMode::EpochShuffle => {
            let mut idx: Vec<usize> = (0..epochs.len()).collect();
            idx.shuffle(&mut rng);
            let [ntr, nv, _] = spec.sizes(idx.len());
            let test = idx.split_off(ntr + nv);
            let val = idx.split_off(ntr);
            [idx, val, test]
        }
        SplitMode::ByRecording => {
            let ids: BTreeSet<&str> = epochs.iter().map(|e| e.recording_id.as_str()).collect();
            let mut ids: Vec<&str> = ids.into_iter().collect();
            ids.shuffle(&mut rng);
            let [ntr, nv, _] = spec.sizes(ids.len());
            let part_of: BTreeMap<&str, usize> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, if i < ntr { 0 } else if i < ntr + nv { 1 } else { 2 }))
                .collect();
            let mut parts: [Vec<usize>; 3] = Default::default();
            for (i, e) in epochs.iter().enumerate() {
                parts[part_of[e.recording_id.as_str()]].push(i);
            }
            parts
        }
    };
    let [train, val, test] = parts;
    let counts = |ix: &[usize]| class_histogram(ix.iter().map(|&i| &epochs[i]));
    Ok(Split {
        class_counts: [counts(&train), counts(&val), counts(&test)],
        train,
        val,
        test,
    })
}

/// Counts of labelled epochs per class `[wake, nrem, rem]`.
pub fn class_histogram<'a>(epochs: impl IntoIterator<Item = &'a Epoch>) -> [usize; 3] {
    let mut c = [0; 3];
    for e in epochs {
        if let Some(l) = e.label {
            c[l.index()] += 1;
        }
    }
    c
}

/// Widens epoch `center` to `context_s` seconds by borrowing half the extra
/// length from each neighbour. Returns `None` when a neighbour is missing.
pub fn context_window(epochs: &[Epoch], center: usize, context_s: f64) -> Result<Option<Epoch>> {
    let c = epochs
        .get(center)
        .ok_or_else(|| Error::dim(format!("epoch {center} out of range")))?;
    let t = c.n_frames();
    let total = frames_per_epoch(context_s, c.frame_rate_hz)?;
    if total < t {
        return Err(Error::Domain(format!(
            "context of {context_s} s is shorter than the {} s epoch",
            c.duration_s
        )));
    }
    if total == t {
        return Ok(Some(c.clone()));
    }
    let extra = total - t;
    let (before, after) = (extra / 2, extra - extra / 2);
    if before > t || after > t {
        return Err(Error::Domain("context may extend at most one epoch on each side".into()));
    }
    let neighbour = |offset: isize| -> Option<&Epoch> {
        let i = center.checked_add_signed(offset)?;
        let e = epochs.get(i)?;
        let expect = c.epoch_index.checked_add_signed(offset)?;
        (e.recording_id == c.recording_id && e.epoch_index == expect && e.n_frames() == t).then_some(e)
    };
    let (Some(prev), Some(next)) = (neighbour(-1), neighbour(1)) else {
        return Ok(None);
    };
    let fl = c.frames.len() / t;
    let mut data = Vec::with_capacity(total * fl);
    data.extend_from_slice(&prev.frames.data()[(t - before) * fl..]);
    data.extend_from_slice(c.frames.data());
    data.extend_from_slice(&next.frames.data()[..after * fl]);
    let mut shape = c.frames.shape().to_vec();
    shape[0] = total;
    Ok(Some(Epoch {
        frames: Tensor::new(&shape, data)?,
        label: c.label,
        recording_id: c.recording_id.clone(),
        epoch_index: c.epoch_index,
        duration_s: context_s,
        frame_rate_hz: c.frame_rate_hz,
    }))
}

/// Context windows for every epoch that has both neighbours, plus the number skipped.
pub fn context_windows(epochs: &[Epoch], context_s: f64) -> Result<(Vec<Epoch>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for i in 0..epochs.len() {
        match context_window(epochs, i, context_s)? {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}
