//! Delta and theta power of the global signal in each planted state.

use wfci_sleep::dataset::{frames_per_epoch, SleepState};
use wfci_sleep::eval::band_power_by_state;
use wfci_sleep::preprocess::{run_pipeline, PreprocessConfig};
use wfci_sleep::synth::{generate_many, SynthSpec};

fn main() -> wfci_sleep::Result<()> {
    let spec = SynthSpec {
        n_epochs: 60,
        ..SynthSpec::default()
    };
    // Without regression the global trace keeps the planted rhythms.
    let cfg = PreprocessConfig {
        gsr: false,
        ..PreprocessConfig::default()
    };
    let mut traces = Vec::new();
    for rec in generate_many(&spec, 4)? {
        let pre = run_pipeline(&rec.stack, &cfg)?;
        traces.push((pre.global_trace(), rec.truth.states.clone()));
    }
    let fpe = frames_per_epoch(spec.epoch_s, spec.frame_rate_hz)?;
    let report = band_power_by_state(&traces, fpe, spec.frame_rate_hz)?;
    println!(
        "delta {:?} Hz, theta {:?} Hz",
        [report.delta_band.lo, report.delta_band.hi],
        [report.theta_band.lo, report.theta_band.hi]
    );
    for s in SleepState::ALL {
        if let Some(st) = &report.states[s.index()] {
            println!(
                "{:<5} {:>3} epochs  delta {:.3e}  theta {:.3e}  delta/theta {:.2}",
                s.code(),
                st.n_segments,
                st.delta,
                st.theta,
                st.delta / st.theta
            );
        }
    }
    Ok(())
}
