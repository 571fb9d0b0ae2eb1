//! Signals, windowing, datasets, few-shot selection, pair sampling, label
//! permutation and a synthetic bearing-signal generator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::WINDOW_LEN;
use crate::seeded_rng;

/// Default shift between consecutive windows.
pub const WINDOW_STEP: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::data(format!("unknown domain {other:?} (expected source or target)"))),
        }
    }
}

/// A recorded 1-D signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignal {
    samples: Vec<f64>,
    sample_rate_hz: f64,
    pub metadata: BTreeMap<String, String>,
}

impl RawSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("signal is empty"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("signal sample {i} is not finite")));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::data(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        Ok(RawSignal {
            samples,
            sample_rate_hz,
            metadata: BTreeMap::new(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub values: Vec<f64>,
    pub label: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub size: usize,
    pub step: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            size: WINDOW_LEN,
            step: WINDOW_STEP,
        }
    }
}

impl WindowSpec {
    /// Number of windows a signal of `len` samples yields.
    pub fn count(&self, len: usize) -> usize {
        if len < self.size {
            0
        } else {
            (len - self.size) / self.step + 1
        }
    }

    /// Signal length needed for exactly `windows` windows.
    pub fn signal_len(&self, windows: usize) -> usize {
        self.size + self.step * windows.saturating_sub(1)
    }
}

/// Cuts overlapping windows from `signal`; consecutive windows share
/// `size − step` samples and a trailing remainder is dropped.
pub fn slide_window(signal: &RawSignal, spec: WindowSpec, label: usize, domain: Domain) -> Result<Vec<LabeledWindow>> {
    if spec.size == 0 || spec.step == 0 {
        return Err(Error::config("window size and step must be positive"));
    }
    if signal.len() < spec.size {
        return Err(Error::data(format!(
            "signal of {} samples is shorter than the {}-sample window",
            signal.len(),
            spec.size
        )));
    }
    Ok((0..spec.count(signal.len()))
        .map(|i| LabeledWindow {
            values: signal.samples[i * spec.step..i * spec.step + spec.size].to_vec(),
            label,
            domain,
        })
        .collect())
}

/// Labeled windows over a label space of `class_count` classes. Some
/// classes may have no windows (incomplete-class sources).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    windows: Vec<LabeledWindow>,
    class_count: usize,
}

impl Dataset {
    pub fn new(windows: Vec<LabeledWindow>, class_count: usize) -> Result<Self> {
        if let Some(w) = windows.iter().find(|w| w.label >= class_count) {
            return Err(Error::data(format!(
                "label {} out of range for {class_count} classes",
                w.label
            )));
        }
        Ok(Dataset { windows, class_count })
    }

    pub fn windows(&self) -> &[LabeledWindow] {
        &self.windows
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for w in &self.windows {
            counts[w.label] += 1;
        }
        counts
    }

    /// Classes with at least one window.
    pub fn classes_present(&self) -> Vec<usize> {
        self.per_class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Window indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, w) in self.windows.iter().enumerate() {
            groups[w.label].push(i);
        }
        groups
    }

    /// Windows whose label is in `classes`, label space unchanged.
    pub fn retain_classes(&self, classes: &[usize]) -> Dataset {
        Dataset {
            windows: self
                .windows
                .iter()
                .filter(|w| classes.contains(&w.label))
                .cloned()
                .collect(),
            class_count: self.class_count,
        }
    }

    pub fn filter_domain(&self, domain: Domain) -> Dataset {
        Dataset {
            windows: self.windows.iter().filter(|w| w.domain == domain).cloned().collect(),
            class_count: self.class_count,
        }
    }

    /// Concatenation; the label space is the larger of the two.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut windows = self.windows.clone();
        windows.extend(other.windows.iter().cloned());
        Dataset {
            windows,
            class_count: self.class_count.max(other.class_count),
        }
    }
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One row of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub label: usize,
    pub domain: Domain,
    /// 1-based line in the manifest; 0 for entries built in code.
    pub line: usize,
}

/// Parses a manifest: one `file,label,domain` row per line. Blank lines,
/// `#` comments and a leading `file,label,domain` header are skipped.
/// Relative paths resolve against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if entries.is_empty() && cols.first().is_some_and(|c| c.eq_ignore_ascii_case("file")) {
            continue;
        }
        let [file, label, domain] = cols.as_slice() else {
            return Err(manifest_err(
                path,
                line_no,
                format!("expected 3 columns file,label,domain; got {}", cols.len()),
            ));
        };
        if file.is_empty() {
            return Err(manifest_err(path, line_no, "empty file column"));
        }
        let label: usize = label
            .parse()
            .map_err(|_| manifest_err(path, line_no, format!("label {label:?} is not a non-negative integer")))?;
        let domain: Domain = domain
            .parse()
            .map_err(|e: Error| manifest_err(path, line_no, e.to_string()))?;
        entries.push(ManifestEntry {
            file: base.join(file),
            label,
            domain,
            line: line_no,
        });
    }
    if entries.is_empty() {
        return Err(manifest_err(path, 0, "no entries"));
    }
    Ok(entries)
}

/// Loads every signal listed in a manifest and windows it.
///
/// With `class_count` set, labels must lie below it and gaps are allowed;
/// otherwise the labels must be exactly `0..=max`.
pub fn load_manifest(path: &Path, spec: WindowSpec, class_count: Option<usize>) -> Result<Dataset> {
    let entries = parse_manifest(path)?;
    let max_label = entries.iter().map(|e| e.label).max().expect("non-empty");
    let classes = match class_count {
        Some(n) => {
            if max_label >= n {
                return Err(Error::data(format!(
                    "{}: label {max_label} out of range for {n} classes",
                    path.display()
                )));
            }
            n
        }
        None => {
            let mut seen = vec![false; max_label + 1];
            for e in &entries {
                seen[e.label] = true;
            }
            if let Some(gap) = seen.iter().position(|s| !s) {
                return Err(Error::data(format!(
                    "{}: labels must be contiguous from 0 but label {gap} has no entry",
                    path.display()
                )));
            }
            max_label + 1
        }
    };

    let mut windows = Vec::new();
    for entry in &entries {
        let at = |e: Error| manifest_err(path, entry.line, e.to_string());
        let signal = read_signal(&entry.file).map_err(at)?;
        windows.extend(slide_window(&signal, spec, entry.label, entry.domain).map_err(at)?);
    }
    Dataset::new(windows, classes)
}

/// Nominal rate attached to signals read from disk.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 12_000.0;

/// Reads a `.f64` (raw little-endian) or single-column `.csv` signal.
pub fn read_signal(path: &Path) -> Result<RawSignal> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let samples = match ext.as_deref() {
        Some("f64") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::data(format!(
                    "{}: length {} is not a multiple of 8 bytes",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
        Some("csv") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut samples = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let cell = line.trim();
                if cell.is_empty() {
                    continue;
                }
                match cell.parse::<f64>() {
                    Ok(v) => samples.push(v),
                    Err(_) if i == 0 => continue,
                    Err(_) => {
                        return Err(Error::data(format!(
                            "{}: line {}: {cell:?} is not a number",
                            path.display(),
                            i + 1
                        )))
                    }
                }
            }
            samples
        }
        _ => {
            return Err(Error::data(format!(
                "{}: unsupported signal format (expected .f64 or .csv)",
                path.display()
            )))
        }
    };
    let mut signal = RawSignal::new(samples, DEFAULT_SAMPLE_RATE_HZ)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    signal
        .metadata
        .insert("path".into(), path.display().to_string());
    Ok(signal)
}

/// Writes samples as raw little-endian `f64`.
pub fn write_signal_f64(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("file,label,domain\n");
    for e in entries {
        text.push_str(&format!("{},{},{}\n", e.file.display(), e.label, e.domain));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-class signature of a synthetic fault signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub base_freq_hz: f64,
    /// Spacing of the decaying impulse bursts.
    pub impulse_period_s: f64,
    /// Relative amplitude of the second harmonic.
    pub harmonic_mix: f64,
}

/// How one domain distorts the class signatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub amplitude_scale: f64,
    pub frequency_offset_hz: f64,
    pub noise_std: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        amplitude_scale: 1.0,
        frequency_offset_hz: 0.0,
        noise_std: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassSignature>,
    pub amplitude: f64,
    /// Peak of each impulse burst relative to `amplitude`.
    pub impulse_amplitude: f64,
    /// Exponential decay rate of a burst, 1/s.
    pub impulse_decay: f64,
    /// Ringing frequency inside a burst.
    pub resonance_hz: f64,
    pub sample_rate_hz: f64,
    pub source: DomainShift,
    pub target: DomainShift,
    pub window: WindowSpec,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("synthetic spec needs at least 2 classes"));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if !(c.base_freq_hz > 0.0 && c.impulse_period_s > 0.0) {
                return Err(Error::config(format!("class {k}: frequencies must be positive")));
            }
            if self.classes[..k]
                .iter()
                .any(|o| o.base_freq_hz == c.base_freq_hz && o.impulse_period_s == c.impulse_period_s)
            {
                return Err(Error::config(format!("class {k} duplicates an earlier signature")));
            }
        }
        for shift in [self.source, self.target] {
            if !(shift.noise_std >= 0.0 && shift.amplitude_scale > 0.0) {
                return Err(Error::config("domain shift needs positive amplitude and non-negative noise"));
            }
            if self
                .classes
                .iter()
                .any(|c| c.base_freq_hz + shift.frequency_offset_hz <= 0.0)
            {
                return Err(Error::config("frequency offset makes a class frequency non-positive"));
            }
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(())
    }

    pub fn shift(&self, domain: Domain) -> DomainShift {
        match domain {
            Domain::Source => self.source,
            Domain::Target => self.target,
        }
    }

    /// Continuous signal of `len` samples for one class in one domain.
    pub fn class_signal(&self, class: usize, domain: Domain, len: usize) -> Result<RawSignal> {
        self.validate()?;
        let sig = self
            .classes
            .get(class)
            .ok_or_else(|| Error::config(format!("class {class} not in synthetic spec")))?;
        let shift = self.shift(domain);
        let stream = (class as u64) << 1 | (domain == Domain::Target) as u64;
        let mut rng = seeded_rng(self.seed, stream);

        let fs = self.sample_rate_hz;
        let freq = sig.base_freq_hz + shift.frequency_offset_hz;
        let amp = self.amplitude * shift.amplitude_scale;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let start: f64 = rng.gen_range(0.0..sig.impulse_period_s);
        let noise = (shift.noise_std > 0.0).then(|| Normal::new(0.0, shift.noise_std).expect("finite std"));
        let tau = std::f64::consts::TAU;

        let samples = (0..len)
            .map(|i| {
                let t = i as f64 / fs;
                let mut v = amp * (tau * freq * t + phase).sin()
                    + sig.harmonic_mix * amp * (tau * 2.0 * freq * t + phase2).sin();
                // Only the most recent burst is modelled; older ones have decayed.
                if t >= start {
                    let since = (t - start) % sig.impulse_period_s;
                    v += self.impulse_amplitude
                        * amp
                        * (-self.impulse_decay * since).exp()
                        * (tau * self.resonance_hz * since).sin();
                }
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                v
            })
            .collect();
        let mut signal = RawSignal::new(samples, fs)?;
        signal.metadata.insert("class".into(), class.to_string());
        signal.metadata.insert("domain".into(), domain.to_string());
        Ok(signal)
    }
}

/// Compact, file-friendly description of a [`SynthSpec`]: class `k` has base
/// frequency `base_freq_hz + k·freq_step_hz` and burst rate
/// `impulse_rate_hz + k·impulse_rate_step_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub base_freq_hz: f64,
    pub freq_step_hz: f64,
    pub impulse_rate_hz: f64,
    pub impulse_rate_step_hz: f64,
    pub harmonic_mix: f64,
    pub amplitude: f64,
    pub impulse_amplitude: f64,
    pub impulse_decay: f64,
    pub resonance_hz: f64,
    pub sample_rate_hz: f64,
    pub source: DomainShift,
    pub target: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 6,
            base_freq_hz: 200.0,
            freq_step_hz: 100.0,
            impulse_rate_hz: 60.0,
            impulse_rate_step_hz: 17.0,
            harmonic_mix: 0.5,
            amplitude: 1.0,
            impulse_amplitude: 1.5,
            impulse_decay: 600.0,
            resonance_hz: 3000.0,
            sample_rate_hz: 12_000.0,
            source: DomainShift {
                amplitude_scale: 1.0,
                frequency_offset_hz: 0.0,
                noise_std: 0.3,
            },
            target: DomainShift {
                amplitude_scale: 1.5,
                frequency_offset_hz: 60.0,
                noise_std: 0.5,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self) -> Result<SynthSpec> {
        let classes = (0..self.class_count)
            .map(|k| ClassSignature {
                base_freq_hz: self.base_freq_hz + k as f64 * self.freq_step_hz,
                impulse_period_s: 1.0 / (self.impulse_rate_hz + k as f64 * self.impulse_rate_step_hz),
                harmonic_mix: self.harmonic_mix,
            })
            .collect();
        let spec = SynthSpec {
            classes,
            amplitude: self.amplitude,
            impulse_amplitude: self.impulse_amplitude,
            impulse_decay: self.impulse_decay,
            resonance_hz: self.resonance_hz,
            sample_rate_hz: self.sample_rate_hz,
            source: self.source,
            target: self.target,
            window: WindowSpec::default(),
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl SynthSpec {
    /// The default synthetic benchmark with `class_count` classes.
    pub fn standard(class_count: usize, seed: u64) -> Result<Self> {
        SynthConfig {
            class_count,
            seed,
            ..SynthConfig::default()
        }
        .to_spec()
    }
}

/// `per_class` windows of every class of `spec` in `domain`, cut from one
/// continuous signal per class.
pub fn synth_generate(spec: &SynthSpec, per_class: usize, domain: Domain) -> Result<Dataset> {
    if per_class < 1 {
        return Err(Error::config("per_class must be at least 1"));
    }
    let len = spec.window.signal_len(per_class);
    let mut windows = Vec::with_capacity(per_class * spec.classes.len());
    for class in 0..spec.classes.len() {
        let signal = spec.class_signal(class, domain, len)?;
        windows.extend(slide_window(&signal, spec.window, class, domain)?);
    }
    Dataset::new(windows, spec.classes.len())
}

/// Picks `n` windows per class uniformly without replacement; returns the
/// selection and the remaining windows (original order).
///
/// Classes are visited in order of first appearance, so renaming labels does
/// not change which windows are picked.
pub fn select_few_shot(target: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let by_class = target.indices_by_class();
    if let Some((class, g)) = by_class
        .iter()
        .enumerate()
        .find(|(_, g)| !g.is_empty() && g.len() < n)
    {
        return Err(Error::data(format!(
            "class {class} has {} windows, fewer than the {n} requested",
            g.len()
        )));
    }
    let mut groups: Vec<&Vec<usize>> = by_class.iter().filter(|g| !g.is_empty()).collect();
    groups.sort_by_key(|g| g[0]);
    let mut rng = seeded_rng(seed, 0x5e1ec7);
    let mut chosen = vec![false; target.len()];
    let mut few = Vec::with_capacity(n * groups.len());
    for g in groups {
        for i in sample_indices(&mut rng, g.len(), n).into_iter() {
            chosen[g[i]] = true;
            few.push(target.windows[g[i]].clone());
        }
    }
    let rest = target
        .windows
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(w, _)| w.clone())
        .collect();
    Ok((
        Dataset::new(few, target.class_count)?,
        Dataset::new(rest, target.class_count)?,
    ))
}

/// One source/target pairing; indices point into the datasets given to
/// [`sample_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub source: usize,
    pub target: usize,
    pub source_label: usize,
    pub target_label: usize,
    pub same_class: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `same_class` agrees with the labels for every pair.
    pub fn is_consistent(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.same_class == (p.source_label == p.target_label))
    }
}

/// Samples `batch` cross-domain pairs; `round(batch · positive_fraction)` of
/// them share a class, the rest have differing labels.
///
/// A positive pair takes a uniform source window among classes present in
/// both domains and a uniform target window of its class. Negatives are
/// uniform over all cross-domain pairs with differing labels. Only label
/// equality is consulted, so a consistent relabeling of both datasets
/// yields the same index pairs.
pub fn sample_pairs<R: Rng + ?Sized>(
    source: &Dataset,
    target_few: &Dataset,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<PairBatch> {
    if batch == 0 {
        return Err(Error::config("pair batch must be non-empty"));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::config(format!(
            "positive fraction must lie in [0, 1], got {positive_fraction}"
        )));
    }
    if source.is_empty() || target_few.is_empty() {
        return Err(Error::data("pair sampling needs non-empty source and target sets"));
    }
    let tgt = target_few.indices_by_class();
    let shared: Vec<usize> = (0..source.len())
        .filter(|&i| tgt.get(source.windows[i].label).is_some_and(|g| !g.is_empty()))
        .collect();
    let positives = (batch as f64 * positive_fraction).round() as usize;
    if positives > 0 && shared.is_empty() {
        return Err(Error::data("no class is present in both domains; cannot form positive pairs"));
    }
    let negatives = batch - positives;
    let src_present = source.classes_present();
    let tgt_present = target_few.classes_present();
    let can_differ = src_present.iter().any(|a| tgt_present.iter().any(|b| a != b));
    if negatives > 0 && !can_differ {
        return Err(Error::data("both domains hold the same single class; cannot form negative pairs"));
    }

    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..positives {
        let s = shared[rng.gen_range(0..shared.len())];
        let class = source.windows[s].label;
        let t = tgt[class][rng.gen_range(0..tgt[class].len())];
        pairs.push(Pair {
            source: s,
            target: t,
            source_label: class,
            target_label: class,
            same_class: true,
        });
    }
    let mut made = 0;
    while made < negatives {
        let s = rng.gen_range(0..source.len());
        let t = rng.gen_range(0..target_few.len());
        let (ls, lt) = (source.windows[s].label, target_few.windows[t].label);
        if ls == lt {
            continue;
        }
        pairs.push(Pair {
            source: s,
            target: t,
            source_label: ls,
            target_label: lt,
            same_class: false,
        });
        made += 1;
    }
    Ok(PairBatch { pairs })
}

/// Checks that `perm` is a bijection on `0..n`.
pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::config(format!(
            "permutation has {} entries but the label space has {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::config(format!("{perm:?} is not a bijection on 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    check_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    Ok(inv)
}

/// Relabels every window `k → perm[k]`; values are untouched.
pub fn permute_labels(dataset: &Dataset, perm: &[usize]) -> Result<Dataset> {
    check_permutation(perm, dataset.class_count)?;
    let windows = dataset
        .windows
        .iter()
        .map(|w| LabeledWindow {
            label: perm[w.label],
            ..w.clone()
        })
        .collect();
    Dataset::new(windows, dataset.class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(len: usize) -> RawSignal {
        RawSignal::new((0..len).map(|i| i as f64).collect(), 12_000.0).unwrap()
    }

    fn toy(labels: &[usize], classes: usize, domain: Domain) -> Dataset {
        let windows = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledWindow {
                values: vec![i as f64; 4],
                label,
                domain,
            })
            .collect();
        Dataset::new(windows, classes).unwrap()
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::default();
        assert_eq!(slide_window(&signal(2208), spec, 0, Domain::Source).unwrap().len(), 3);
        assert_eq!(slide_window(&signal(2048), spec, 0, Domain::Source).unwrap().len(), 1);
        assert_eq!(spec.count(102_048), 1251);
        assert!(slide_window(&signal(2047), spec, 0, Domain::Source).is_err());
    }

    #[test]
    fn windows_overlap() {
        let w = slide_window(&signal(2208), WindowSpec::default(), 2, Domain::Target).unwrap();
        assert_eq!(w[1].values[0], 80.0);
        assert_eq!(w[0].values[80..], w[1].values[..2048 - 80]);
        assert!(w.iter().all(|x| x.label == 2 && x.domain == Domain::Target));
    }

    #[test]
    fn raw_signal_validation() {
        assert!(RawSignal::new(vec![], 1.0).is_err());
        assert!(RawSignal::new(vec![f64::NAN], 1.0).is_err());
        assert!(RawSignal::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn few_shot_partition() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let ds = toy(&labels, 4, Domain::Target);
        let (few, rest) = select_few_shot(&ds, 3, 9).unwrap();
        assert_eq!(few.per_class_counts(), vec![3; 4]);
        assert_eq!(rest.len(), 28);
        let mut all: Vec<f64> = few.windows().iter().chain(rest.windows()).map(|w| w.values[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..40).map(f64::from).collect::<Vec<_>>());
        assert_eq!(select_few_shot(&ds, 3, 9).unwrap(), (few, rest));

        let one = select_few_shot(&toy(&(0..50).map(|i| i % 10).collect::<Vec<_>>(), 10, Domain::Target), 1, 0)
            .unwrap()
            .0;
        assert_eq!(one.len(), 10);
    }

    #[test]
    fn few_shot_names_short_class() {
        let ds = toy(&[0, 0, 0, 1], 2, Domain::Target);
        let err = select_few_shot(&ds, 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn pair_fractions() {
        let src = toy(&[0, 0, 1, 1, 2, 2], 3, Domain::Source);
        let tgt = toy(&[0, 1, 2], 3, Domain::Target);
        let mut rng = seeded_rng(1, 0);
        let all_pos = sample_pairs(&src, &tgt, 32, 1.0, &mut rng).unwrap();
        assert!(all_pos.pairs.iter().all(|p| p.same_class));
        let all_neg = sample_pairs(&src, &tgt, 32, 0.0, &mut rng).unwrap();
        assert!(all_neg.pairs.iter().all(|p| !p.same_class));
        assert!(all_pos.is_consistent() && all_neg.is_consistent());
    }

    #[test]
    fn incomplete_class_positives() {
        let src_labels: Vec<usize> = [0, 1, 2, 4, 7, 9].iter().flat_map(|&k| [k, k]).collect();
        let src = toy(&src_labels, 10, Domain::Source);
        let tgt = toy(&(0..10).collect::<Vec<_>>(), 10, Domain::Target);
        let mut rng = seeded_rng(2, 0);
        let batch = sample_pairs(&src, &tgt, 200, 0.5, &mut rng).unwrap();
        for p in batch.pairs.iter().filter(|p| p.same_class) {
            assert!([0, 1, 2, 4, 7, 9].contains(&p.source_label));
        }
        assert!(batch.is_consistent());
    }

    #[test]
    fn pairs_need_shared_class() {
        let src = toy(&[0, 1], 4, Domain::Source);
        let tgt = toy(&[2, 3], 4, Domain::Target);
        let mut rng = seeded_rng(3, 0);
        assert!(sample_pairs(&src, &tgt, 4, 0.5, &mut rng).is_err());
        assert!(sample_pairs(&src, &tgt, 4, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn permutation_examples() {
        let labels: Vec<usize> = (0..10).collect();
        let ds = toy(&labels, 10, Domain::Target);
        let identity: Vec<usize> = (0..10).collect();
        assert_eq!(permute_labels(&ds, &identity).unwrap(), ds);

        let table_e = [0, 9, 6, 3, 2, 5, 7, 8, 4, 1];
        let e = permute_labels(&ds, &table_e).unwrap();
        let got: Vec<usize> = e.windows().iter().map(|w| w.label).collect();
        assert_eq!(got, table_e);
        assert!(e.windows().iter().zip(ds.windows()).all(|(a, b)| a.values == b.values));

        let inv = invert_permutation(&table_e).unwrap();
        assert_eq!(permute_labels(&e, &inv).unwrap(), ds);

        assert!(permute_labels(&ds, &[0, 0, 1, 2, 3, 4, 5, 6, 7, 8]).is_err());
        assert!(permute_labels(&ds, &[0, 1]).is_err());
    }

    #[test]
    fn domain_parsing() {
        assert_eq!("Source".parse::<Domain>().unwrap(), Domain::Source);
        assert_eq!(" target ".parse::<Domain>().unwrap(), Domain::Target);
        assert!("both".parse::<Domain>().is_err());
    }
}
