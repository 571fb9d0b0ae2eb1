//! Drives a run from a TOML configuration, as the command-line tool does.

use protoadapt::config::RunConfig;
use protoadapt::pipeline::run_experiment;

const CONFIG: &str = r#"
seed = 4

[synth]
class_count = 4

[data]
source_per_class = 40
target_per_class = 20

[train]
variant = "FTM"
n_shot = 2
batch_size = 8
epochs = 10
steps_per_epoch = 3
fine_tune_epochs = 2

[loss]
gamma_s = 5.0
"#;

fn main() -> protoadapt::Result<()> {
    let cfg = RunConfig::from_toml(CONFIG)?;
    cfg.validate()?;
    let split = cfg.build_split()?;
    let result = run_experiment(&split, &cfg.train)?;
    println!("{}", result.report.metrics_text(&[("variant", cfg.train.variant.to_string())]));
    println!("resolved configuration:\n{}", cfg.to_toml());
    Ok(())
}
