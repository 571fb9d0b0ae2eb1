//! Run configuration read from a sectioned TOML file.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/fpm"
//!
//! [data]
//! source = "source.csv"   # manifests; omit both for synthetic data
//! target = "target.csv"
//!
//! [synth]
//! class_count = 6
//!
//! [train]
//! variant = "FPM"
//! n_shot = 3
//!
//! [loss]
//! gamma_s = 5.0
//! ```
//!
//! Unknown keys are rejected. The top-level `seed`, when given, overrides
//! the seeds of the `synth` and `train` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, SynthConfig, WindowSpec, WINDOW_STEP};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::WINDOW_LEN;
use crate::pipeline::{Split, TrainConfig};

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Separate test manifest; without it the target remainder is used.
    pub test: Option<PathBuf>,
    /// Declared label-space size for manifests; labels may then have gaps.
    pub class_count: Option<usize>,
    /// Keep only these source labels.
    pub source_classes: Option<Vec<usize>>,
    pub window_step: usize,
    /// Synthetic windows per class in each domain.
    pub source_per_class: usize,
    pub target_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: None,
            target: None,
            test: None,
            class_count: None,
            source_classes: None,
            window_step: WINDOW_STEP,
            source_per_class: 200,
            target_per_class: 105,
        }
    }
}

impl DataConfig {
    pub fn uses_manifests(&self) -> bool {
        self.source.is_some() || self.target.is_some()
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            size: WINDOW_LEN,
            step: self.window_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    /// Reads `path`; relative manifest paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for slot in [&mut cfg.data.source, &mut cfg.data.target, &mut cfg.data.test] {
            if let Some(p) = slot.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Propagates the top-level seed and the loss section into the
    /// training configuration.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        self.seed = Some(self.train.seed);
        self.train.loss = self.loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.window_step == 0 {
            return Err(Error::config("window_step must be positive"));
        }
        if self.data.source.is_some() != self.data.target.is_some() {
            return Err(Error::config("data.source and data.target must be given together"));
        }
        if !self.data.uses_manifests() {
            self.synth.to_spec()?;
            if self.data.source_per_class == 0 {
                return Err(Error::config("source_per_class must be positive"));
            }
            if self.data.target_per_class <= self.train.n_shot && self.data.test.is_none() {
                return Err(Error::config(format!(
                    "target_per_class ({}) leaves no test windows at n_shot {}",
                    self.data.target_per_class, self.train.n_shot
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Loads or generates the data and splits off the few-shot windows.
    pub fn build_split(&self) -> Result<Split> {
        let seed = self.train.seed;
        let n = self.train.n_shot;
        let mut split = match (&self.data.source, &self.data.target) {
            (Some(src), Some(tgt)) => {
                let window = self.data.window();
                let classes = self.data.class_count;
                let source = load_manifest(src, window, classes)?;
                let target = load_manifest(tgt, window, classes)?;
                Split::new(source, &target, n, seed)?
            }
            _ => Split::synthetic(
                &self.synth.to_spec()?,
                self.data.source_per_class,
                self.data.target_per_class,
                None,
                n,
                seed,
            )?,
        };
        if let Some(keep) = &self.data.source_classes {
            split.source = split.source.retain_classes(keep);
        }
        if let Some(test) = &self.data.test {
            split.test = load_manifest(test, self.data.window(), self.data.class_count)?;
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Variant;

    #[test]
    fn sections_parse_and_seed_propagates() {
        let cfg = RunConfig::from_toml(
            "seed = 7\n[train]\nvariant = \"FTM\"\nn_shot = 3\n[loss]\ngamma_s = 5.0\n[synth]\nclass_count = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.train.variant, Variant::Ftm);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (7, 7));
        assert_eq!(cfg.train.loss.gamma_s, 5.0);
        assert_eq!(cfg.synth.class_count, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let cfg = RunConfig::from_toml("seed = 3\n[loss]\nlambda = 0.25\n").unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn manifests_must_come_in_pairs() {
        let cfg = RunConfig::from_toml("[data]\nsource = \"s.csv\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
