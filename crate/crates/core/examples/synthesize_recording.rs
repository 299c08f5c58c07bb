//! Generates a few synthetic recordings and writes them as raw directories.
//!
//! `cargo run --example synthesize_recording -- /tmp/wfci-synth`

use std::path::PathBuf;

use wfci_sleep::dataset::SleepState;
use wfci_sleep::synth::{generate_many, write_synth, SynthSpec};

fn main() -> wfci_sleep::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wfci-synth"));
    let spec = SynthSpec {
        n_epochs: 60,
        ..SynthSpec::default()
    };
    for rec in generate_many(&spec, 3)? {
        let mut counts = [0usize; 3];
        for s in &rec.truth.states {
            counts[s.index()] += 1;
        }
        let dir = out.join(&rec.stack.recording_id);
        write_synth(&dir, &rec)?;
        println!(
            "{}: {} frames at {} Hz, {} wake / {} nrem / {} rem epochs -> {}",
            rec.stack.recording_id,
            rec.stack.n_frames(),
            spec.frame_rate_hz,
            counts[SleepState::Wake.index()],
            counts[SleepState::Nrem.index()],
            counts[SleepState::Rem.index()],
            dir.display()
        );
    }
    Ok(())
}
