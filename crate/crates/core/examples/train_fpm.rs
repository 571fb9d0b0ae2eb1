//! Trains the prototypical model on a synthetic domain shift with a few
//! labeled target windows and prints the target confusion matrix.
//!
//! cargo run --release --example train_fpm -- [n_shot] [seed]

use protoadapt::benchmark;
use protoadapt::pipeline::{min_prototype_l1, run_experiment, Variant};

fn main() -> protoadapt::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let n_shot = args.next().unwrap_or(3) as usize;
    let seed = args.next().unwrap_or(0);

    let split = benchmark::split(n_shot, seed, None)?;
    let cfg = benchmark::config(Variant::Fpm, n_shot, seed);
    println!(
        "source {} windows, labeled target {}, test {}",
        split.source.len(),
        split.target_few.len(),
        split.test.len()
    );
    let result = run_experiment(&split, &cfg)?;
    for (epoch, loss) in result.train_losses.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>3} loss {loss:.4}");
    }
    let protos = result.state.model.prototypes().expect("prototypical head");
    println!("min prototype L1 distance {:.4}", min_prototype_l1(protos).unwrap_or(f64::NAN));
    println!("accuracy {:.4}", result.report.accuracy);
    print!("{}", result.report.confusion_csv());
    Ok(())
}
