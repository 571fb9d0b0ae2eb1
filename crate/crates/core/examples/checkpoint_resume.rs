//! Stops training halfway, saves a checkpoint, reloads it and finishes.
//! The result equals an uninterrupted run bit for bit.

use protoadapt::benchmark;
use protoadapt::checkpoint::Checkpoint;
use protoadapt::pipeline::{train, train_from, TrainConfig, Variant};

fn main() -> protoadapt::Result<()> {
    let split = benchmark::split(1, 0, None)?;
    let full = TrainConfig {
        epochs: 6,
        ..benchmark::config(Variant::Fpm, 1, 0)
    };
    let half = TrainConfig { epochs: 3, ..full.clone() };

    let straight = train(&split.source, &split.target_few, &full)?;

    let path = std::env::temp_dir().join("protoadapt-resume.ckpt");
    let first = train(&split.source, &split.target_few, &half)?;
    Checkpoint::from(first.state).save(&path)?;
    let restored = Checkpoint::load(&path)?;
    println!("checkpoint {} after {} epochs", path.display(), restored.epochs_completed);
    let resumed = train_from(restored.into_state()?, &split.source, &split.target_few, &full)?;

    println!("uninterrupted losses {:?}", straight.epoch_losses);
    println!("resumed losses       {:?}", resumed.epoch_losses);
    println!("identical parameters: {}", straight.state.model == resumed.state.model);
    Ok(())
}
