//! Agreement statistics between two scorings of the same epochs.

use wfci_sleep::dataset::SleepState::{self, Nrem, Rem, Wake};
use wfci_sleep::eval::{cohens_kappa, confusion, fragmentation, Hypnogram, MetricsReport};

fn main() -> wfci_sleep::Result<()> {
    let reference = [Wake, Wake, Nrem, Nrem, Nrem, Nrem, Rem, Rem, Wake, Wake, Nrem, Nrem];
    let predicted = [Wake, Nrem, Nrem, Nrem, Nrem, Rem, Rem, Rem, Wake, Wake, Nrem, Wake];
    let cm = confusion(&reference, &predicted)?;
    println!("confusion (rows reference, columns predicted):");
    for (s, row) in SleepState::ALL.iter().zip(&cm.counts) {
        println!("  {:<5} {:?}", s.code(), row);
    }
    println!("kappa {:.4}", cohens_kappa(&reference, &predicted)?.value);
    println!("{}", MetricsReport::from_labels(&reference, &predicted)?.summary());

    for (name, seq) in [("reference", &reference), ("predicted", &predicted)] {
        let f = fragmentation(&[Hypnogram::from_states("demo", 10.0, seq)])?;
        println!("{name}: bouts {:?}, transitions {}, mean bout s {:?}", f.bouts, f.transitions, f.mean_bout_s);
    }
    Ok(())
}
