//! Trains on recordings whose state signal sits in the top-left quadrant and
//! prints the mean Grad-CAM map as a coarse grid.

use wfci_sleep::dataset::{epoch_stack, SplitMode, SplitSpec};
use wfci_sleep::interpret::{grad_cam, top_decile_mass_in};
use wfci_sleep::model::ArchConfig;
use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate_many, SynthMode, SynthSpec};
use wfci_sleep::train::{run_experiment, TrainConfig};

fn main() -> wfci_sleep::Result<()> {
    let spec = SynthSpec {
        n_epochs: 40,
        mean_dwell_s: [10.0, 10.0, 10.0],
        mode: SynthMode::AnteriorQuadrant,
        ..SynthSpec::default()
    };
    // A single planted blob dominates the global mean, so regression is off.
    let pre_cfg = PreprocessConfig {
        gsr: false,
        ..PreprocessConfig::default()
    };
    let mut epochs = Vec::new();
    for rec in generate_many(&spec, 8)? {
        let pre = run_pipeline(&rec.stack, &pre_cfg)?;
        epochs.extend(epoch_stack(&pre, spec.epoch_s, &rec.labels, true)?);
    }
    let split = SplitSpec {
        fractions: [0.75, 0.125, 0.125],
        seed: 0,
        mode: SplitMode::ByRecording,
    };
    let arch = ArchConfig {
        convs_per_block: 1,
        ..ArchConfig::tiny()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let exp = run_experiment(&epochs, &split, &arch, &cfg)?;
    println!("test: {}", exp.test_report.summary());

    let [h, w] = arch.input_hw;
    let mut mean = vec![0.0; h * w];
    let mut mass = 0.0;
    let test = &exp.split.test;
    for &i in test {
        let e = &epochs[i];
        let map = grad_cam(&exp.params, &e.frames, e.label.expect("labelled"))?;
        mass += top_decile_mass_in(&map, 0..h / 2, 0..w / 2);
        mean.iter_mut().zip(&map.map).for_each(|(a, b)| *a += b / test.len() as f64);
    }
    println!("top-decile mass in the anterior quadrant: {:.3}", mass / test.len() as f64);
    for r in (0..h).step_by(4) {
        let row: Vec<String> = (0..w).step_by(4).map(|c| format!("{:4.2}", mean[r * w + c])).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
