//! Agreement metrics, fragmentation, hypnograms and spectra.

pub mod spectral;
pub mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{LabelFile, LabelRow, SleepState};
use crate::error::{Error, Result};

pub use spectral::{band_power, band_power_by_state, periodogram, Band, BandPowerReport, DELTA, THETA};

/// Rows are the reference labelling, columns the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion(reference: &[SleepState], predicted: &[SleepState]) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::dim(format!(
            "{} reference labels vs {} predictions",
            reference.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (r, p) in reference.iter().zip(predicted) {
        cm.counts[r.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the value was reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Indexed by class: wake, nrem, rem.
    pub per_class: [ClassMetrics; 3],
    pub accuracy: f64,
    /// Support-weighted mean F1.
    pub weighted_f1: f64,
    /// Unweighted mean F1 over classes present in either labelling.
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Data("no scored epochs".into()));
    }
    let mut per_class = [ClassMetrics::default(); 3];
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut present = 0;
    for (c, m) in per_class.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let (precision, u1) = ratio(tp, cm.col_sum(c));
        let (recall, u2) = ratio(tp, cm.row_sum(c));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        *m = ClassMetrics {
            precision,
            recall,
            f1,
            support: cm.row_sum(c),
            undefined: u1 || u2,
        };
        weighted += f1 * m.support as f64;
        if cm.row_sum(c) + cm.col_sum(c) > 0 {
            macro_sum += f1;
            present += 1;
        }
    }
    let trace: u64 = (0..3).map(|c| cm.counts[c][c]).sum();
    Ok(ClassificationMetrics {
        per_class,
        accuracy: trace as f64 / n as f64,
        weighted_f1: weighted / n as f64,
        macro_f1: macro_sum / present as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1, so κ was defined by convention.
    pub degenerate: bool,
}

pub fn kappa_from_confusion(cm: &ConfusionMatrix) -> Result<Kappa> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::Data("no scored epochs".into()));
    }
    let po = (0..3).map(|c| cm.counts[c][c]).sum::<u64>() as f64 / n;
    let pe: f64 = (0..3)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return Ok(Kappa {
            value: if po >= 1.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (po - pe) / (1.0 - pe),
        degenerate: false,
    })
}

pub fn cohens_kappa(reference: &[SleepState], predicted: &[SleepState]) -> Result<Kappa> {
    kappa_from_confusion(&confusion(reference, predicted)?)
}

/// Ordered state sequence of one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub recording_id: String,
    pub duration_s: f64,
    pub entries: Vec<(usize, SleepState)>,
}

impl Hypnogram {
    pub fn new(recording_id: &str, duration_s: f64, entries: Vec<(usize, SleepState)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data("hypnogram epoch indices must strictly increase".into()));
        }
        Ok(Hypnogram {
            recording_id: recording_id.to_string(),
            duration_s,
            entries,
        })
    }

    pub fn from_states(recording_id: &str, duration_s: f64, states: &[SleepState]) -> Self {
        Hypnogram {
            recording_id: recording_id.to_string(),
            duration_s,
            entries: states.iter().copied().enumerate().collect(),
        }
    }

    pub fn states(&self) -> Vec<SleepState> {
        self.entries.iter().map(|e| e.1).collect()
    }

    /// CSV with header `epoch_index,state`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch_index", "state"])?;
        for (i, s) in &self.entries {
            w.write_record([i.to_string(), s.code().to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Renders one row per state (wake top) as a black-on-white PNG strip.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let n = self.entries.len().max(1);
        let px = (600 / n).clamp(1, 8);
        let (w, band) = (n * px, 20usize);
        let h = 3 * band;
        let mut img = vec![255u8; w * h];
        for (k, (_, s)) in self.entries.iter().enumerate() {
            let row = s.index();
            for y in row * band + 4..(row + 1) * band - 4 {
                for x in k * px..(k + 1) * px {
                    img[y * w + x] = 0;
                }
            }
        }
        crate::interpret::write_gray_png(path, w, h, &img)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fragmentation {
    /// Mean bout length in seconds per state; `None` when the state never occurs.
    pub mean_bout_s: [Option<f64>; 3],
    pub bouts: [usize; 3],
    pub transitions: usize,
}

/// Bout statistics over one or more hypnograms. Runs never span recordings.
pub fn fragmentation(hyps: &[Hypnogram]) -> Result<Fragmentation> {
    if hyps.iter().all(|h| h.entries.is_empty()) {
        return Err(Error::Data("fragmentation of an empty hypnogram".into()));
    }
    let mut bouts = [0usize; 3];
    let mut seconds = [0.0f64; 3];
    let mut transitions = 0;
    for h in hyps {
        let mut prev: Option<SleepState> = None;
        for (_, s) in &h.entries {
            if prev != Some(*s) {
                if prev.is_some() {
                    transitions += 1;
                }
                bouts[s.index()] += 1;
            }
            seconds[s.index()] += h.duration_s;
            prev = Some(*s);
        }
    }
    Ok(Fragmentation {
        mean_bout_s: std::array::from_fn(|c| (bouts[c] > 0).then(|| seconds[c] / bouts[c] as f64)),
        bouts,
        transitions,
    })
}

/// Everything reported for one comparison of two labellings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_epochs: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
    pub kappa: Kappa,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragmentation_reference: Option<Fragmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragmentation_predicted: Option<Fragmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_power: Option<BandPowerReport>,
}

impl MetricsReport {
    pub fn from_labels(reference: &[SleepState], predicted: &[SleepState]) -> Result<Self> {
        let cm = confusion(reference, predicted)?;
        Ok(MetricsReport {
            n_epochs: cm.total(),
            metrics: classification_metrics(&cm)?,
            kappa: kappa_from_confusion(&cm)?,
            confusion: cm,
            fragmentation_reference: None,
            fragmentation_predicted: None,
            band_power: None,
        })
    }

    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "n={} accuracy={:.4} weighted_f1={:.4} macro_f1={:.4} kappa={:.4}{}\n",
            self.n_epochs,
            m.accuracy,
            m.weighted_f1,
            m.macro_f1,
            self.kappa.value,
            if self.kappa.degenerate { " (degenerate)" } else { "" }
        );
        for st in SleepState::ALL {
            let c = &m.per_class[st.index()];
            s += &format!(
                "  {:<5} precision={:.3} recall={:.3} f1={:.3} support={}\n",
                st.name(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["reference", "pred_W", "pred_N", "pred_R"])?;
        for st in SleepState::ALL {
            let row = self.confusion.counts[st.index()];
            w.write_record([
                st.code().to_string(),
                row[0].to_string(),
                row[1].to_string(),
                row[2].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads either a label file (`recording_id,epoch_index,label`) or a
/// single-recording hypnogram (`epoch_index,state`, recording id taken from
/// `default_id`).
pub fn read_label_table(path: &Path, default_id: &str) -> Result<LabelFile> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let idx_col = col(&["epoch_index"])
        .ok_or_else(|| Error::Data(format!("{}: missing `epoch_index` column", path.display())))?;
    let lab_col = col(&["label", "state"])
        .ok_or_else(|| Error::Data(format!("{}: missing `label`/`state` column", path.display())))?;
    let rec_col = col(&["recording_id"]);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let epoch_index = field(idx_col)
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad epoch index `{}`", path.display(), field(idx_col))))?;
        rows.push(LabelRow {
            recording_id: rec_col.map_or(default_id.to_string(), |c| field(c).to_string()),
            epoch_index,
            label: field(lab_col).parse()?,
        });
    }
    Ok(LabelFile { rows })
}

/// Joins two label tables on `(recording_id, epoch_index)`; both must cover
/// exactly the same keys. Returns aligned sequences plus per-recording hypnograms.
pub fn align_labels(
    a: &LabelFile,
    b: &LabelFile,
) -> Result<(Vec<SleepState>, Vec<SleepState>, BTreeMap<String, (Vec<SleepState>, Vec<SleepState>)>)> {
    let key = |f: &LabelFile| -> Result<BTreeMap<(String, usize), SleepState>> {
        let mut m = BTreeMap::new();
        for r in &f.rows {
            if m.insert((r.recording_id.clone(), r.epoch_index), r.label).is_some() {
                return Err(Error::Data(format!(
                    "duplicate label for ({}, {})",
                    r.recording_id, r.epoch_index
                )));
            }
        }
        Ok(m)
    };
    let (ma, mb) = (key(a)?, key(b)?);
    if ma.len() != mb.len() || ma.keys().zip(mb.keys()).any(|(x, y)| x != y) {
        let only_a = ma.keys().filter(|k| !mb.contains_key(*k)).count();
        let only_b = mb.keys().filter(|k| !ma.contains_key(*k)).count();
        return Err(Error::Data(format!(
            "label tables are not aligned: {only_a} epochs only in the first, {only_b} only in the second"
        )));
    }
    let mut per_rec: BTreeMap<String, (Vec<SleepState>, Vec<SleepState>)> = BTreeMap::new();
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    for ((k, la), lb) in ma.iter().zip(mb.values()) {
        ra.push(*la);
        rb.push(*lb);
        let e = per_rec.entry(k.0.clone()).or_default();
        e.0.push(*la);
        e.1.push(*lb);
    }
    Ok((ra, rb, per_rec))
}

/// Compares two external labellings (`a` as reference) with the same
/// machinery used for model evaluation.
pub fn score_agreement(a: &LabelFile, b: &LabelFile, duration_s: f64) -> Result<MetricsReport> {
    let (ra, rb, per_rec) = align_labels(a, b)?;
    let mut report = MetricsReport::from_labels(&ra, &rb)?;
    let hyp = |pick: fn(&(Vec<SleepState>, Vec<SleepState>)) -> &Vec<SleepState>| -> Vec<Hypnogram> {
        per_rec
            .iter()
            .map(|(id, v)| Hypnogram::from_states(id, duration_s, pick(v)))
            .collect()
    };
    report.fragmentation_reference = Some(fragmentation(&hyp(|v| &v.0))?);
    report.fragmentation_predicted = Some(fragmentation(&hyp(|v| &v.1))?);
    Ok(report)
}
