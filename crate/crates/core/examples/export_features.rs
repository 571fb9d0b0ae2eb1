//! Trains briefly, then writes per-window features, head outputs and the
//! prototype matrix to CSV for plotting.
//!
//! cargo run --release --example export_features -- [features.csv]

use std::path::PathBuf;

use protoadapt::benchmark;
use protoadapt::pipeline::{export_features, prototypes_path, run_experiment, TrainConfig, Variant};

fn main() -> protoadapt::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("features.csv"));
    let split = benchmark::split(3, 0, None)?;
    let cfg = TrainConfig {
        epochs: 10,
        ..benchmark::config(Variant::Fpm, 3, 0)
    };
    let model = run_experiment(&split, &cfg)?.state.model;
    let summary = export_features(&model, &[&split.target_few, &split.test], &path)?;
    println!("{} rows -> {}", summary.rows, path.display());
    println!("{} prototypes -> {}", summary.prototype_rows, prototypes_path(&path).display());
    Ok(())
}
