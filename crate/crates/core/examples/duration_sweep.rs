//! Retrains at several epoch lengths and prints one row per duration.

use wfci_sleep::dataset::{SplitMode, SplitSpec};
use wfci_sleep::eval::sweep::duration_sweep;
use wfci_sleep::model::ArchConfig;
use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate_many, SynthSpec};
use wfci_sleep::train::TrainConfig;

fn main() -> wfci_sleep::Result<()> {
    let spec = SynthSpec {
        n_epochs: 40,
        mean_dwell_s: [10.0, 10.0, 10.0],
        ..SynthSpec::default()
    };
    let mut recordings = Vec::new();
    for rec in generate_many(&spec, 8)? {
        let pre = run_pipeline(&rec.stack, &PreprocessConfig::default())?;
        let labels = rec.labels.sequence(&pre.recording_id)?;
        recordings.push((pre, labels));
    }
    let split = SplitSpec {
        fractions: [0.75, 0.125, 0.125],
        seed: 0,
        mode: SplitMode::ByRecording,
    };
    let arch = ArchConfig {
        channels: 8,
        lstm_hidden: 16,
        ..ArchConfig::tiny()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let rows = duration_sweep(&recordings, spec.epoch_s, &[1.0, 2.0, 5.0, 10.0], &split, &arch, &cfg)?;
    println!("duration  frames  epochs  test  macro_f1  kappa");
    for r in rows {
        println!(
            "{:>6.1} s  {:>6}  {:>6}  {:>4}  {:>8.3}  {:>5.3}",
            r.duration_s, r.frames_per_epoch, r.n_epochs, r.n_test, r.macro_f1, r.kappa
        );
    }
    Ok(())
}
