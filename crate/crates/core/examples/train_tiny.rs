//! Trains a small network on synthetic recordings and reports held-out metrics.

use wfci_sleep::dataset::{epoch_stack, SplitMode, SplitSpec};
use wfci_sleep::model::ArchConfig;
use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate_many, SynthSpec};
use wfci_sleep::train::{run_experiment, TrainConfig};

fn main() -> wfci_sleep::Result<()> {
    let spec = SynthSpec {
        n_epochs: 40,
        mean_dwell_s: [10.0, 10.0, 10.0],
        ..SynthSpec::default()
    };
    let mut epochs = Vec::new();
    for rec in generate_many(&spec, 8)? {
        let pre = run_pipeline(&rec.stack, &PreprocessConfig::default())?;
        epochs.extend(epoch_stack(&pre, spec.epoch_s, &rec.labels, true)?);
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
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let exp = run_experiment(&epochs, &split, &arch, &cfg)?;
    for row in &exp.log.rows {
        println!(
            "epoch {}: train loss {:.4}, val loss {:.4}, val kappa {:.3}",
            row.epoch, row.train_loss, row.val_loss, row.val_kappa
        );
    }
    println!("test: {}", exp.test_report.summary());
    Ok(())
}
