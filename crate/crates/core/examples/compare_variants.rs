//! Runs the three training variants over several seeds and shot counts.
//! The default grid takes a few minutes on one core.
//!
//! cargo run --release --example compare_variants -- [seeds] [n,n,...]

use protoadapt::benchmark;
use protoadapt::pipeline::{run_experiment, Variant};

fn main() -> protoadapt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(2, |s| s.parse().expect("seed count"));
    let shots: Vec<usize> = args
        .get(1)
        .map_or("1,3".into(), String::clone)
        .split(',')
        .map(|s| s.parse().expect("shot count"))
        .collect();

    println!("{:<6}{:>4}  {:>9}  per seed", "model", "n", "accuracy");
    for variant in Variant::ALL {
        for &n in &shots {
            let mut accs = Vec::new();
            for seed in 0..seeds {
                let split = benchmark::split(n, seed, None)?;
                accs.push(run_experiment(&split, &benchmark::config(variant, n, seed))?.report.accuracy);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let each: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
            println!("{:<6}{n:>4}  {mean:>9.3}  {}", variant.to_string(), each.join(" "));
        }
    }
    Ok(())
}
