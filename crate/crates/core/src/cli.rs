//! Command-line front end.
//!
//! Every subcommand writes its artifacts plus a resolved copy of its
//! settings into the output directory and prints one summary line. Exit
//! status is 0 on success, 2 for bad flags or configuration and 1 for
//! runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    check_permutation, load_manifest, parse_manifest, write_manifest, write_signal_f64, Domain,
    ManifestEntry, WindowSpec, WINDOW_STEP,
};
use crate::error::{Error, Result};
use crate::network::WINDOW_LEN;
use crate::pipeline::{evaluate, export_features, fine_tune, train_from, write_text, TrainState};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PROTOADAPT_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "protoadapt", version, about = "Few-shot domain adaptation for vibration signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic source and target signals with their manifests.
    Generate(GenerateArgs),
    /// Train, fine-tune and evaluate on the target remainder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Export features, head outputs and prototypes as CSV.
    ExportFeatures(ExportArgs),
    /// Rewrite a manifest with relabeled classes.
    PermuteLabels(PermuteArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    source_per_class: Option<usize>,
    #[arg(long)]
    target_per_class: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CTM, FTM or FPM.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    n_shot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fine_tune_epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long, default_value_t = WINDOW_STEP)]
    window_step: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// May be repeated.
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long, default_value_t = WINDOW_STEP)]
    window_step: usize,
    /// Feature CSV; defaults to `features.csv` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PermuteArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated images of labels 0, 1, …
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    permutation: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status. Summary lines go to stdout, diagnostics to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ExportFeatures(a) => export_cmd(a),
        Command::PermuteLabels(a) => permute_cmd(a),
    };
    match result {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(err, "error: {e}\n\nFor usage, run with --help.");
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn output_dir(flag: Option<PathBuf>, config: Option<&Path>) -> PathBuf {
    flag.or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default().resolved()),
    }
}

fn generate(a: GenerateArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = Some(seed);
    }
    if let Some(n) = a.classes {
        cfg.synth.class_count = n;
    }
    if let Some(n) = a.source_per_class {
        cfg.data.source_per_class = n;
    }
    if let Some(n) = a.target_per_class {
        cfg.data.target_per_class = n;
    }
    cfg.data.source = None;
    cfg.data.target = None;
    let mut cfg = cfg.resolved();
    cfg.validate()?;
    let dir = output_dir(a.out, cfg.output_dir.as_deref());
    let spec = cfg.synth.to_spec()?;
    let signals = dir.join("signals");
    fs::create_dir_all(&signals).map_err(|e| Error::io(&signals, e))?;
    let mut windows = [0usize; 2];
    for (slot, domain, per_class) in [
        (0, Domain::Source, cfg.data.source_per_class),
        (1, Domain::Target, cfg.data.target_per_class),
    ] {
        let spec = crate::data::SynthSpec {
            window: cfg.data.window(),
            ..spec.clone()
        };
        let mut entries = Vec::new();
        for class in 0..spec.classes.len() {
            let len = spec.window.signal_len(per_class);
            let signal = spec.class_signal(class, domain, len)?;
            let name = format!("{domain}_class{class}.f64");
            write_signal_f64(&signals.join(&name), signal.samples())?;
            entries.push(ManifestEntry {
                file: Path::new("signals").join(name),
                label: class,
                domain,
                line: 0,
            });
        }
        write_manifest(&dir.join(format!("{domain}.csv")), &entries)?;
        windows[slot] = per_class * spec.classes.len();
    }
    cfg.data.source = Some("source.csv".into());
    cfg.data.target = Some("target.csv".into());
    cfg.output_dir = None;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(format!(
        "generate classes={} seed={} source_windows={} target_windows={} out={}",
        spec.classes.len(),
        cfg.synth.seed,
        windows[0],
        windows[1],
        dir.display()
    ))
}

fn train(a: TrainArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = &a.variant {
        cfg.train.variant = v.parse()?;
    }
    if let Some(n) = a.n_shot {
        cfg.train.n_shot = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = Some(seed);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = a.fine_tune_epochs {
        cfg.train.fine_tune_epochs = e;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let dir = output_dir(a.out, cfg.output_dir.as_deref());
    let split = cfg.build_split()?;
    let t = &cfg.train;
    let classes = crate::pipeline::class_count(&split.source, &split.target_few).max(split.test.class_count());
    let state = match &a.resume {
        Some(path) => Checkpoint::load(path)?.into_state()?,
        None => TrainState::init(t, classes)?,
    };
    let trained = train_from(state, &split.source, &split.target_few, t)?;
    Checkpoint::from(trained.state.clone()).save(&dir.join("train.ckpt"))?;
    let tuned = if t.fine_tune_epochs > 0 {
        fine_tune(trained.state, &split.target_few, t)?
    } else {
        crate::pipeline::TrainOutcome {
            state: trained.state,
            epoch_losses: Vec::new(),
        }
    };
    let model = tuned.state.model;
    Checkpoint::model_only(model.clone()).save(&dir.join("model.ckpt"))?;
    let report = evaluate(&model, &split.test)?;

    let mut losses = String::from("phase,epoch,loss\n");
    let first = tuned.state.epochs_completed - trained.epoch_losses.len();
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("train,{},{l:?}\n", first + i));
    }
    for (i, l) in tuned.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("fine_tune,{i},{l:?}\n"));
    }
    write_text(&dir.join("losses.csv"), &losses)?;
    write_text(&dir.join("confusion.csv"), &report.confusion_csv())?;
    let extra = [
        ("variant", t.variant.to_string()),
        ("n_shot", t.n_shot.to_string()),
        ("seed", t.seed.to_string()),
        ("train_windows", split.source.len().to_string()),
        ("few_shot_windows", split.target_few.len().to_string()),
    ];
    write_text(&dir.join("metrics.txt"), &report.metrics_text(&extra))?;
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(dir.clone());
    write_text(&dir.join("config.toml"), &resolved.to_toml())?;
    Ok(format!(
        "variant={} n={} seed={} accuracy={:.4} out={}",
        t.variant,
        t.n_shot,
        t.seed,
        report.accuracy,
        dir.display()
    ))
}

fn window(step: usize) -> Result<WindowSpec> {
    if step == 0 {
        return Err(Error::config("window step must be positive"));
    }
    Ok(WindowSpec {
        size: WINDOW_LEN,
        step,
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<String> {
    let spec = window(a.window_step)?;
    let dir = output_dir(a.out.clone(), None);
    let model = Checkpoint::load(&a.model)?.model;
    let test = load_manifest(&a.test, spec, a.class_count)?;
    let report = evaluate(&model, &test)?;
    write_text(&dir.join("confusion.csv"), &report.confusion_csv())?;
    let extra = [("model", a.model.display().to_string()), ("test", a.test.display().to_string())];
    write_text(&dir.join("metrics.txt"), &report.metrics_text(&extra))?;
    write_text(&dir.join("evaluate.toml"), &to_toml(&a))?;
    Ok(format!(
        "evaluate head={:?} classes={} accuracy={:.4} correct={} total={} out={}",
        model.arch.head,
        model.class_count(),
        report.accuracy,
        report.correct(),
        report.total(),
        dir.display()
    ))
}

fn export_cmd(a: ExportArgs) -> Result<String> {
    let spec = window(a.window_step)?;
    let path = a.out.clone().unwrap_or_else(|| output_dir(None, None).join("features.csv"));
    let model = Checkpoint::load(&a.model)?.model;
    let datasets = a
        .manifests
        .iter()
        .map(|m| load_manifest(m, spec, a.class_count))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = datasets.iter().collect();
    let summary = export_features(&model, &refs, &path)?;
    write_text(&path.with_extension("toml"), &to_toml(&a))?;
    Ok(format!(
        "export rows={} prototypes={} out={}",
        summary.rows,
        summary.prototype_rows,
        path.display()
    ))
}

fn permute_cmd(a: PermuteArgs) -> Result<String> {
    let same = |x: &Path, y: &Path| match (fs::canonicalize(x), fs::canonicalize(y)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if same(&a.manifest, &a.out) {
        return Err(Error::config("--out must differ from --manifest; inputs are never modified"));
    }
    check_permutation(&a.permutation, a.permutation.len()).map_err(|e| Error::config(e.to_string()))?;
    let entries = parse_manifest(&a.manifest)?;
    let mut mapped = Vec::with_capacity(entries.len());
    for e in entries {
        let label = *a.permutation.get(e.label).ok_or_else(|| Error::Manifest {
            path: a.manifest.clone(),
            line: e.line,
            message: format!("label {} outside the {}-class permutation", e.label, a.permutation.len()),
        })?;
        let file = fs::canonicalize(&e.file).map_err(|err| Error::io(&e.file, err))?;
        mapped.push(ManifestEntry { file, label, ..e });
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_manifest(&a.out, &mapped)?;
    write_text(&a.out.with_extension("toml"), &to_toml(&a))?;
    Ok(format!("permute entries={} classes={} out={}", mapped.len(), a.permutation.len(), a.out.display()))
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("arguments serialize")
}
