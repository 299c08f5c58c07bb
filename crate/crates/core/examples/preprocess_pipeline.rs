//! Runs the preprocessing chain on a synthetic recording and shows what each
//! step recorded.

use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate, SynthSpec};

fn main() -> wfci_sleep::Result<()> {
    let raw = generate(&SynthSpec::default())?.stack;
    let pre = run_pipeline(&raw, &PreprocessConfig::default())?;
    println!("{}: {} frames, {} brain pixels", pre.recording_id, pre.n_frames(), pre.mask.count());
    for step in &pre.provenance {
        println!("  {:<12} {}", step.step, step.params);
    }
    let g = pre.global_trace();
    let rms = (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
    // Regression runs before the ratio, so only a small global residue is left.
    println!("global trace rms after regression: {rms:.2e}");

    let no_gsr = run_pipeline(&raw, &PreprocessConfig { gsr: false, ..PreprocessConfig::default() })?;
    let g = no_gsr.global_trace();
    let rms = (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
    println!("global trace rms without regression: {rms:.2e}");
    Ok(())
}
