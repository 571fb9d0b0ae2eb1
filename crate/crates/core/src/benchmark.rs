//! The desk-scale synthetic benchmark: six fault classes, a moderate shift
//! between source and target domain, and a training budget that fits a
//! single CPU core.
//!
//! The budget differs from the library defaults: batches of 16 pairs, 200
//! optimizer steps, no fine-tuning stage, and a sharper prototype
//! assignment (`gamma_s = 5`). All other loss weights keep their defaults.

use crate::data::{SynthConfig, SynthSpec};
use crate::error::Result;
use crate::pipeline::{Split, TrainConfig, Variant};

pub const CLASSES: usize = 6;
pub const SOURCE_PER_CLASS: usize = 200;
/// The remainder after taking `n` labeled windows is the test set.
pub const TARGET_PER_CLASS: usize = 105;
pub const BATCH_SIZE: usize = 16;
pub const EPOCHS: usize = 40;
pub const STEPS_PER_EPOCH: usize = 5;
pub const GAMMA_S: f64 = 5.0;

/// Synthetic signal model for `seed`.
pub fn synth(seed: u64) -> Result<SynthSpec> {
    SynthConfig {
        class_count: CLASSES,
        seed,
        ..SynthConfig::default()
    }
    .to_spec()
}

/// Source, labeled target and test windows. `source_classes` restricts the
/// source domain to a subset of labels.
pub fn split(n_shot: usize, seed: u64, source_classes: Option<&[usize]>) -> Result<Split> {
    Split::synthetic(&synth(seed)?, SOURCE_PER_CLASS, TARGET_PER_CLASS, source_classes, n_shot, seed)
}

pub fn config(variant: Variant, n_shot: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        batch_size: BATCH_SIZE,
        epochs: EPOCHS,
        steps_per_epoch: STEPS_PER_EPOCH,
        fine_tune_epochs: 0,
        n_shot,
        seed,
        ..TrainConfig::default()
    };
    cfg.loss.gamma_s = GAMMA_S;
    cfg
}
