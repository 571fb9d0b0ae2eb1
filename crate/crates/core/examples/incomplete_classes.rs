//! Source data that lacks some fault classes: the target few-shot windows
//! are the only examples of the missing labels.
//!
//! cargo run --release --example incomplete_classes

use protoadapt::benchmark;
use protoadapt::pipeline::{run_experiment, Variant};

fn main() -> protoadapt::Result<()> {
    let source_classes = [0, 1, 2, 4];
    let (n, seed) = (5, 0);
    let split = benchmark::split(n, seed, Some(&source_classes))?;
    println!("source labels {:?}, target labels {:?}", split.source.classes_present(), split.target_few.classes_present());
    for variant in [Variant::Ctm, Variant::Fpm] {
        let report = run_experiment(&split, &benchmark::config(variant, n, seed))?.report;
        let per_class: Vec<String> = report
            .per_class_accuracy
            .iter()
            .map(|a| a.map_or("NA".into(), |a| format!("{a:.2}")))
            .collect();
        println!("{variant}: accuracy {:.3}, per class [{}]", report.accuracy, per_class.join(", "));
    }
    Ok(())
}
