//! Relabels the target domain so its class indices no longer line up with
//! the source, then retrains. Prototypes are matched through the labeled
//! target windows, so accuracy should barely move.
//!
//! cargo run --release --example label_permutation

use protoadapt::benchmark;
use protoadapt::data::{invert_permutation, permute_labels};
use protoadapt::pipeline::{run_experiment, Variant};

fn main() -> protoadapt::Result<()> {
    let perm = [3, 5, 0, 1, 4, 2];
    let (n, seed) = (3, 0);
    let cfg = benchmark::config(Variant::Fpm, n, seed);

    let split = benchmark::split(n, seed, None)?;
    let plain = run_experiment(&split, &cfg)?.report.accuracy;

    let mut shuffled = split.clone();
    shuffled.target_few = permute_labels(&split.target_few, &perm)?;
    shuffled.test = permute_labels(&split.test, &perm)?;
    let moved = run_experiment(&shuffled, &cfg)?.report.accuracy;

    println!("target relabeling {perm:?} (inverse {:?})", invert_permutation(&perm)?);
    println!("FPM accuracy: original labels {plain:.3}, relabeled target {moved:.3}");
    Ok(())
}
