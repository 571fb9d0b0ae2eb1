//! Training loops for the CTM, FTM and FPM variants, fine-tuning on the
//! few labeled target windows, evaluation and feature export.
//!
//! Every source of randomness is a stream of [`seeded_rng`] keyed by the
//! run seed and the epoch, so a run resumed from a checkpoint replays the
//! same batches as an uninterrupted one.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_pairs, select_few_shot, synth_generate, Dataset, Domain, LabeledWindow, SynthSpec,
};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_var, distance_loss, proto_loss_lcb_batch, softmax_ce_batch, LossConfig};
use crate::network::{
    argmax, nearest_row, Architecture, BoundModel, HeadKind, ModelParams, EXTRACTOR_TENSORS, PROTO_DIM,
};
use crate::optim::{AdaDelta, DEFAULT_EPSILON, DEFAULT_RHO};
use crate::seeded_rng;
use crate::tensor::{Mode, Tape, Tensor, Var};

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_FINE_TUNE: u64 = 2 << 32;
const STREAM_SPLIT: u64 = 3 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Source and few-shot target windows pooled under a softmax head.
    #[serde(rename = "CTM")]
    Ctm,
    /// Distance loss plus a softmax head.
    #[serde(rename = "FTM")]
    Ftm,
    /// Distance loss plus the regularized prototype head.
    #[serde(rename = "FPM")]
    Fpm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ctm, Variant::Ftm, Variant::Fpm];

    pub fn head(self) -> HeadKind {
        match self {
            Variant::Fpm => HeadKind::Prototypical,
            Variant::Ctm | Variant::Ftm => HeadKind::Traditional,
        }
    }

    /// Whether training samples cross-domain pairs for the distance loss.
    pub fn uses_pairs(self) -> bool {
        self != Variant::Ctm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ctm => "CTM",
            Variant::Ftm => "FTM",
            Variant::Fpm => "FPM",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CTM" => Ok(Variant::Ctm),
            "FTM" => Ok(Variant::Ftm),
            "FPM" => Ok(Variant::Fpm),
            _ => Err(Error::config(format!("unknown variant {s:?}; expected CTM, FTM or FPM"))),
        }
    }
}

/// Which parameters fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneScope {
    All,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the source set.
    pub steps_per_epoch: usize,
    pub fine_tune_epochs: usize,
    pub fine_tune_scope: FineTuneScope,
    pub n_shot: usize,
    pub seed: u64,
    pub dropout: f64,
    pub positive_fraction: f64,
    pub proto_dim: usize,
    pub rho: f64,
    pub epsilon: f64,
    /// Lives in its own config section.
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Fpm,
            batch_size: 64,
            epochs: 50,
            steps_per_epoch: 0,
            fine_tune_epochs: 20,
            fine_tune_scope: FineTuneScope::All,
            n_shot: 1,
            seed: 0,
            dropout: 0.5,
            positive_fraction: 0.5,
            proto_dim: PROTO_DIM,
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.n_shot < 1 {
            return Err(Error::config("n_shot must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::config(format!(
                "positive_fraction must lie in [0, 1], got {}",
                self.positive_fraction
            )));
        }
        if self.proto_dim < 1 {
            return Err(Error::config("proto_dim must be at least 1"));
        }
        AdaDelta::new(&[], self.rho, self.epsilon)?;
        self.loss.validate()
    }

    pub fn architecture(&self, classes: usize) -> Architecture {
        Architecture {
            head: self.variant.head(),
            classes,
            proto_dim: self.proto_dim,
        }
    }
}

/// Model, optimizer and progress; everything needed to resume training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub optimizer: AdaDelta,
    pub epochs_completed: usize,
}

impl TrainState {
    /// Freshly initialised model for `classes` classes, seeded by `cfg.seed`.
    pub fn init(cfg: &TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let model = ModelParams::init(cfg.architecture(classes), &mut seeded_rng(cfg.seed, STREAM_INIT))?;
        Self::from_model(model, cfg)
    }

    /// Wraps an existing model with a fresh optimizer.
    pub fn from_model(model: ModelParams, cfg: &TrainConfig) -> Result<Self> {
        let lengths: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Ok(TrainState {
            optimizer: AdaDelta::new(&lengths, cfg.rho, cfg.epsilon)?,
            model,
            epochs_completed: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Mean step loss of every epoch run by this call.
    pub epoch_losses: Vec<f64>,
}

/// Number of classes spanned by the two training sets.
pub fn class_count(source: &Dataset, target_few: &Dataset) -> usize {
    source.class_count().max(target_few.class_count())
}

/// Trains a freshly initialised model for `cfg.epochs` epochs.
pub fn train(source: &Dataset, target_few: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = TrainState::init(cfg, class_count(source, target_few))?;
    train_from(state, source, target_few, cfg)
}

/// Continues training from `state` until `cfg.epochs` epochs are complete.
pub fn train_from(
    mut state: TrainState,
    source: &Dataset,
    target_few: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_model(&state.model, cfg, class_count(source, target_few))?;
    if source.is_empty() && target_few.is_empty() {
        return Err(Error::data("training needs at least one window"));
    }
    if cfg.variant.uses_pairs() {
        if target_few.is_empty() {
            return Err(Error::data(format!("{} needs labeled target windows", cfg.variant)));
        }
        // Surface pairing problems before any parameter changes.
        sample_pairs(source, target_few, cfg.batch_size, cfg.positive_fraction, &mut seeded_rng(0, 0))?;
    }
    let steps = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        source.len().max(1).div_ceil(cfg.batch_size)
    };
    let mut epoch_losses = Vec::new();
    while state.epochs_completed < cfg.epochs {
        let mut rng = seeded_rng(cfg.seed, STREAM_TRAIN + state.epochs_completed as u64);
        let mut total = 0.0;
        for _ in 0..steps {
            total += train_step(&mut state, source, target_few, cfg, &mut rng)?;
        }
        epoch_losses.push(total / steps as f64);
        state.epochs_completed += 1;
    }
    Ok(TrainOutcome { state, epoch_losses })
}

fn check_model(model: &ModelParams, cfg: &TrainConfig, classes: usize) -> Result<()> {
    if model.arch.head != cfg.variant.head() {
        return Err(Error::config(format!(
            "{} needs a {:?} head, model has {:?}",
            cfg.variant,
            cfg.variant.head(),
            model.arch.head
        )));
    }
    if classes > model.class_count() {
        return Err(Error::config(format!(
            "data spans {classes} classes, model has {}",
            model.class_count()
        )));
    }
    Ok(())
}

fn train_step<R: Rng>(
    state: &mut TrainState,
    source: &Dataset,
    target_few: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, true);
    let loss = if cfg.variant.uses_pairs() {
        pair_step_loss(&mut tape, &bound, source, target_few, cfg, rng)?
    } else {
        let pool = source.len() + target_few.len();
        let picks = sample_indices(rng, pool, cfg.batch_size.min(pool)).into_vec();
        let windows: Vec<&LabeledWindow> = picks
            .iter()
            .map(|&i| match i.checked_sub(source.len()) {
                None => &source.windows()[i],
                Some(j) => &target_few.windows()[j],
            })
            .collect();
        let mut samples = Vec::with_capacity(windows.len());
        for w in windows {
            let f = bound.features(&mut tape, &w.values)?;
            samples.push((bound.head(&mut tape, f, cfg.dropout, Mode::Train, rng)?, w.label));
        }
        classification_loss(&mut tape, &bound, &samples, &cfg.loss)?
    };
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    apply_grads(&mut tape, &bound, &mut state.model, &mut state.optimizer, |_| true)?;
    Ok(value)
}

/// `λ·L_D + (1 − λ)·L_cls` on one pair batch. The classification term runs
/// over the distinct windows of the batch, so each window is forwarded once.
fn pair_step_loss<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    source: &Dataset,
    target_few: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    let batch = sample_pairs(source, target_few, cfg.batch_size, cfg.positive_fraction, rng)?;
    let mut src_feat: Vec<Option<Var>> = vec![None; source.len()];
    let mut tgt_feat: Vec<Option<Var>> = vec![None; target_few.len()];
    let mut labeled: Vec<(Var, usize)> = Vec::new();
    let mut triples = Vec::with_capacity(batch.len());
    for pair in &batch.pairs {
        let mut feature = |slot: &mut Option<Var>, w: &LabeledWindow, tape: &mut Tape| -> Result<Var> {
            if let Some(v) = *slot {
                return Ok(v);
            }
            let v = bound.features(tape, &w.values)?;
            labeled.push((v, w.label));
            *slot = Some(v);
            Ok(v)
        };
        let fs = feature(&mut src_feat[pair.source], &source.windows()[pair.source], tape)?;
        let ft = feature(&mut tgt_feat[pair.target], &target_few.windows()[pair.target], tape)?;
        triples.push((fs, ft, pair.same_class));
    }
    let ld = distance_loss(tape, &triples, cfg.loss.gamma_d)?;
    let mut samples = Vec::with_capacity(labeled.len());
    for (f, label) in labeled {
        samples.push((bound.head(tape, f, cfg.dropout, Mode::Train, rng)?, label));
    }
    let lc = classification_loss(tape, bound, &samples, &cfg.loss)?;
    combined_loss_var(tape, ld, lc, cfg.loss.lambda)
}

/// `L_CB` for a prototypical head, softmax cross-entropy otherwise.
fn classification_loss(
    tape: &mut Tape,
    bound: &BoundModel,
    samples: &[(Var, usize)],
    loss: &LossConfig,
) -> Result<Var> {
    match bound.prototypes() {
        Some(c) => proto_loss_lcb_batch(tape, samples, c, loss),
        None => softmax_ce_batch(tape, samples),
    }
}

/// One AdaDelta step over the parameters selected by `keep`.
fn apply_grads(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &mut ModelParams,
    optimizer: &mut AdaDelta,
    keep: impl Fn(usize) -> bool,
) -> Result<()> {
    let grads: Vec<Tensor> = bound
        .params()
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| {
            tape.take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();
    let refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
    let mut params: Vec<&mut Tensor> = model
        .tensors_mut()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, t)| t)
        .collect();
    optimizer.step(&mut params, &refs)
}

/// Continues training on the classification loss alone over `target_few`
/// for `cfg.fine_tune_epochs` epochs.
///
/// With [`FineTuneScope::All`] the optimizer state of `state` carries over.
/// With [`FineTuneScope::Head`] the extractor is frozen and a fresh
/// optimizer drives the head parameters.
pub fn fine_tune(mut state: TrainState, target_few: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if target_few.is_empty() {
        return Err(Error::data("fine-tuning needs labeled target windows"));
    }
    check_model(&state.model, cfg, target_few.class_count())?;
    let mut epoch_losses = Vec::with_capacity(cfg.fine_tune_epochs);
    match cfg.fine_tune_scope {
        FineTuneScope::All => {
            for epoch in 0..cfg.fine_tune_epochs {
                let mut rng = seeded_rng(cfg.seed, STREAM_FINE_TUNE + epoch as u64);
                let mut order: Vec<usize> = (0..target_few.len()).collect();
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let chunks = order.chunks(cfg.batch_size);
                let steps = chunks.len();
                for chunk in chunks {
                    let mut tape = Tape::new();
                    let bound = state.model.bind(&mut tape, true);
                    let mut samples = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let w = &target_few.windows()[i];
                        let f = bound.features(&mut tape, &w.values)?;
                        samples.push((bound.head(&mut tape, f, cfg.dropout, Mode::Train, &mut rng)?, w.label));
                    }
                    let loss = classification_loss(&mut tape, &bound, &samples, &cfg.loss)?;
                    total += tape.value(loss).item();
                    tape.backward(loss)?;
                    apply_grads(&mut tape, &bound, &mut state.model, &mut state.optimizer, |_| true)?;
                }
                epoch_losses.push(total / steps as f64);
            }
        }
        FineTuneScope::Head => {
            let features = target_few
                .windows()
                .iter()
                .map(|w| state.model.extract_features(&w.values))
                .collect::<Result<Vec<_>>>()?;
            let head_lengths: Vec<usize> = state.model.tensors()[EXTRACTOR_TENSORS..]
                .iter()
                .map(|t| t.len())
                .collect();
            let mut optimizer = AdaDelta::new(&head_lengths, cfg.rho, cfg.epsilon)?;
            let is_head = |i: usize| i >= EXTRACTOR_TENSORS;
            for epoch in 0..cfg.fine_tune_epochs {
                let mut rng = seeded_rng(cfg.seed, STREAM_FINE_TUNE + epoch as u64);
                let mut order: Vec<usize> = (0..target_few.len()).collect();
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let chunks = order.chunks(cfg.batch_size);
                let steps = chunks.len();
                for chunk in chunks {
                    let mut tape = Tape::new();
                    let bound = state.model.bind_where(&mut tape, is_head);
                    let mut samples = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let f = tape.constant(Tensor::vector(&features[i]));
                        let label = target_few.windows()[i].label;
                        samples.push((bound.head(&mut tape, f, cfg.dropout, Mode::Train, &mut rng)?, label));
                    }
                    let loss = classification_loss(&mut tape, &bound, &samples, &cfg.loss)?;
                    total += tape.value(loss).item();
                    tape.backward(loss)?;
                    apply_grads(&mut tape, &bound, &mut state.model, &mut optimizer, is_head)?;
                }
                epoch_losses.push(total / steps as f64);
            }
        }
    }
    Ok(TrainOutcome { state, epoch_losses })
}

/// Eval-mode predictions for every window of `data`.
pub fn predict(model: &ModelParams, data: &Dataset) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mark = tape.len();
    let mut out = Vec::with_capacity(data.len());
    for w in data.windows() {
        let f = bound.features(&mut tape, &w.values)?;
        let y = bound.head(&mut tape, f, 0.0, Mode::Eval, &mut rng)?;
        let label = match bound.prototypes() {
            Some(c) => nearest_row(tape.value(c), tape.value(y).data())?,
            None => argmax(tape.value(y).data()),
        };
        out.push(label);
        tape.truncate(mark);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Correct predictions over all windows.
    pub accuracy: f64,
    /// Per true class; `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!(
                "{} labels against {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::data("cannot evaluate on an empty test set"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::dim(format!("label pair ({t}, {p}) outside {classes} classes")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            accuracy: correct as f64 / truth.len() as f64,
            per_class_accuracy,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|k| self.confusion[k][k]).sum()
    }

    /// Header `true\pred,0,1,…` followed by one row per true class.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\pred");
        for k in 0..n {
            out.push_str(&format!(",{k}"));
        }
        out.push('\n');
        for (k, row) in self.confusion.iter().enumerate() {
            out.push_str(&k.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    /// `key=value` lines; `extra` entries come first.
    pub fn metrics_text(&self, extra: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("accuracy={}\n", self.accuracy));
        out.push_str(&format!("correct={}\n", self.correct()));
        out.push_str(&format!("total={}\n", self.total()));
        for (k, a) in self.per_class_accuracy.iter().enumerate() {
            match a {
                Some(a) => out.push_str(&format!("class_{k}_accuracy={a}\n")),
                None => out.push_str(&format!("class_{k}_accuracy=NA\n")),
            }
        }
        out
    }
}

/// Eval-mode accuracy, per-class accuracy and confusion matrix.
pub fn evaluate(model: &ModelParams, test: &Dataset) -> Result<EvalReport> {
    if test.class_count() > model.class_count() {
        return Err(Error::config(format!(
            "test set spans {} classes, model has {}",
            test.class_count(),
            model.class_count()
        )));
    }
    let predicted = predict(model, test)?;
    let truth: Vec<usize> = test.windows().iter().map(|w| w.label).collect();
    EvalReport::from_predictions(&truth, &predicted, model.class_count())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Path of the prototype table written next to a feature export.
pub fn prototypes_path(features_path: &Path) -> PathBuf {
    let stem = features_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".into());
    features_path.with_file_name(format!("{stem}_prototypes.csv"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportSummary {
    pub rows: usize,
    /// Zero for a traditional head, which has no prototypes.
    pub prototype_rows: usize,
}

/// Writes one CSV row per window: domain, true label, the feature vector
/// `h0…` and the eval-mode head output `z0…`. For a prototypical head the
/// prototypes go to [`prototypes_path`]. Values round-trip exactly.
pub fn export_features(model: &ModelParams, datasets: &[&Dataset], path: &Path) -> Result<ExportSummary> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mark = tape.len();
    let head_width = match model.arch.head {
        HeadKind::Prototypical => model.arch.proto_dim,
        HeadKind::Traditional => model.class_count(),
    };
    let mut out = String::from("domain,true_label");
    for i in 0..crate::network::FEATURE_DIM {
        out.push_str(&format!(",h{i}"));
    }
    for i in 0..head_width {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    let mut rows = 0;
    for data in datasets {
        for w in data.windows() {
            let f = bound.features(&mut tape, &w.values)?;
            let z = bound.head(&mut tape, f, 0.0, Mode::Eval, &mut rng)?;
            out.push_str(&format!("{},{}", w.domain, w.label));
            for v in tape.value(f).data().iter().chain(tape.value(z).data()) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
            tape.truncate(mark);
            rows += 1;
        }
    }
    write_text(path, &out)?;
    let prototype_rows = match model.prototypes() {
        Some(c) => {
            let p = c.shape()[1];
            let mut table = String::from("class");
            for i in 0..p {
                table.push_str(&format!(",z{i}"));
            }
            table.push('\n');
            for (k, row) in c.data().chunks_exact(p).enumerate() {
                table.push_str(&k.to_string());
                for v in row {
                    table.push_str(&format!(",{v:?}"));
                }
                table.push('\n');
            }
            write_text(&prototypes_path(path), &table)?;
            c.shape()[0]
        }
        None => 0,
    };
    Ok(ExportSummary { rows, prototype_rows })
}

/// Minimum L1 distance over all pairs of prototype rows.
pub fn min_prototype_l1(prototypes: &Tensor) -> Option<f64> {
    let p = *prototypes.shape().get(1)?;
    let rows: Vec<&[f64]> = prototypes.data().chunks_exact(p).collect();
    let mut best: Option<f64> = None;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

/// Source windows, labeled target windows and the target remainder used
/// for testing.
#[derive(Debug, Clone)]
pub struct Split {
    pub source: Dataset,
    pub target_few: Dataset,
    pub test: Dataset,
}

impl Split {
    /// Splits `target` into `n_shot` labeled windows per class and the rest.
    pub fn new(source: Dataset, target: &Dataset, n_shot: usize, seed: u64) -> Result<Self> {
        let (target_few, test) = select_few_shot(target, n_shot, seed)?;
        Ok(Split { source, target_few, test })
    }

    /// Synthetic source and target sets from `spec`. `source_classes`
    /// restricts the source domain to a subset of the labels.
    pub fn synthetic(
        spec: &SynthSpec,
        source_per_class: usize,
        target_per_class: usize,
        source_classes: Option<&[usize]>,
        n_shot: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut source = synth_generate(spec, source_per_class, Domain::Source)?;
        if let Some(keep) = source_classes {
            source = source.retain_classes(keep);
        }
        let target = synth_generate(spec, target_per_class, Domain::Target)?;
        Self::new(source, &target, n_shot, seed ^ STREAM_SPLIT)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub state: TrainState,
    pub train_losses: Vec<f64>,
    pub fine_tune_losses: Vec<f64>,
    pub report: EvalReport,
}

/// Train, fine-tune (when `cfg.fine_tune_epochs > 0`) and evaluate on the
/// remainder of the target set.
pub fn run_experiment(split: &Split, cfg: &TrainConfig) -> Result<ExperimentResult> {
    let state = TrainState::init(cfg, class_count(&split.source, &split.target_few).max(split.test.class_count()))?;
    run_experiment_from(state, split, cfg)
}

/// As [`run_experiment`], starting from a given state.
pub fn run_experiment_from(state: TrainState, split: &Split, cfg: &TrainConfig) -> Result<ExperimentResult> {
    let trained = train_from(state, &split.source, &split.target_few, cfg)?;
    let (state, fine_tune_losses) = if cfg.fine_tune_epochs > 0 {
        let tuned = fine_tune(trained.state, &split.target_few, cfg)?;
        (tuned.state, tuned.epoch_losses)
    } else {
        (trained.state, Vec::new())
    };
    let report = evaluate(&state.model, &split.test)?;
    Ok(ExperimentResult {
        state,
        train_losses: trained.epoch_losses,
        fine_tune_losses,
        report,
    })
}
