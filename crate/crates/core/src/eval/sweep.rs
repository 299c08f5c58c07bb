//! Retraining across epoch durations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{reepoch, SleepState, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::preprocess::PreprocessedStack;
use crate::train::{run_experiment, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub duration_s: f64,
    pub frames_per_epoch: usize,
    pub n_epochs: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub kappa: f64,
}

/// Re-epochs every recording at each duration, retrains from scratch with the
/// same seeds, and evaluates on the held-out split.
///
/// `recordings` pairs each preprocessed stack with its labels at `base_s`.
pub fn duration_sweep(
    recordings: &[(PreprocessedStack, Vec<SleepState>)],
    base_s: f64,
    durations: &[f64],
    split_spec: &SplitSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(durations.len());
    for &d in durations {
        if !(1.0..=20.0).contains(&d) {
            return Err(Error::config("durations", format!("{d} s lies outside [1, 20] s")));
        }
        let mut epochs = Vec::new();
        for (stack, labels) in recordings {
            epochs.extend(reepoch(stack, base_s, labels, d)?);
        }
        if epochs.is_empty() {
            return Err(Error::Data(format!("no {d}-s epochs fit in the recordings")));
        }
        let exp = run_experiment(&epochs, split_spec, arch, cfg)?;
        let r = &exp.test_report;
        rows.push(SweepRow {
            duration_s: d,
            frames_per_epoch: epochs[0].n_frames(),
            n_epochs: epochs.len(),
            n_test: exp.split.test.len(),
            accuracy: r.metrics.accuracy,
            weighted_f1: r.metrics.weighted_f1,
            macro_f1: r.metrics.macro_f1,
            kappa: r.kappa.value,
        });
        log::info!("sweep {d} s: macro_f1={:.4} kappa={:.4}", r.metrics.macro_f1, r.kappa.value);
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
