//! Attention over time for recordings where NREM carries a brief burst and REM
//! a rhythm spanning the whole epoch.

use wfci_sleep::dataset::{epoch_stack, SleepState, SplitMode, SplitSpec};
use wfci_sleep::interpret::{aggregate_attention, extract_attention};
use wfci_sleep::model::ArchConfig;
use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate_many, SynthMode, SynthSpec};
use wfci_sleep::train::{run_experiment, TrainConfig};

fn main() -> wfci_sleep::Result<()> {
    let spec = SynthSpec {
        n_epochs: 40,
        mean_dwell_s: [10.0, 10.0, 10.0],
        mode: SynthMode::AttentionProbe,
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
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let exp = run_experiment(&epochs, &split, &ArchConfig::tiny(), &cfg)?;
    println!("test: {}", exp.test_report.summary());

    let traces = exp
        .split
        .test
        .iter()
        .map(|&i| extract_attention(&exp.params, &epochs[i]))
        .collect::<wfci_sleep::Result<Vec<_>>>()?;
    for s in SleepState::ALL {
        if let Some(t) = traces.iter().find(|t| t.label == Some(s)) {
            let bars: String = t.alpha.iter().map(|a| if *a > 1.5 / t.alpha.len() as f64 { '#' } else { '.' }).collect();
            println!("{:<5} {bars}  entropy {:.3}", s.code(), t.entropy());
        }
    }
    for summary in aggregate_attention(&traces)? {
        println!("{:<5} n={:<3} mean entropy {:.3}", summary.state.code(), summary.n, summary.mean_entropy);
    }
    Ok(())
}
