//! Experiment configuration: the training config plus where data, targets
//! and outputs live. Files are JSON whose keys mirror the training config
//! fields; command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textalign_core::data::Dataset;
use textalign_core::schedule::ScheduleKind;
use textalign_core::text_targets::{RawEmbeddingSet, WhitenedTargetSet, DEFAULT_FLOOR};
use textalign_core::trainer::TrainConfig;

use crate::cache::load_cache_with_dim;
use crate::dataset::{load_split, manifest_path, EVAL_SPLIT, TRAIN_SPLIT};
use crate::error::{IoContext, LabError, Result};

fn default_text_seed() -> u64 {
    7
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Dataset directory with `train` and (optionally) `eval` splits.
    pub data_dir: PathBuf,
    /// Embedding cache for the training captions. Without one, captions are
    /// pseudo-encoded with `text_seed` and whitened on the training split.
    #[serde(default)]
    pub targets: Option<PathBuf>,
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
    #[serde(default = "default_floor")]
    pub whitening_floor: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Flag values that replace file values when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    pub jump_epoch: Option<usize>,
    pub ramp: Option<usize>,
    pub adaptive: Option<bool>,
    pub noise_rho: Option<f64>,
    pub fraction: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub baseline: Option<bool>,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig, data_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            train,
            data_dir: data_dir.into(),
            targets: None,
            text_seed: default_text_seed(),
            whitening_floor: default_floor(),
            output_dir: None,
        }
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = serde_json::from_slice(&fs::read(path).at(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        if let Some(t) = &mut cfg.targets {
            resolve(t);
        }
        if let Some(o) = &mut cfg.output_dir {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.train;
        if let Some(e) = o.epochs {
            t.epochs = e;
            t.schedule.total_epochs = e;
        }
        if let Some(l) = o.lambda {
            t.schedule.peak = l;
        }
        if let Some(k) = o.schedule {
            t.schedule.kind = k;
        }
        if let Some(j) = o.jump_epoch {
            t.schedule.jump_epoch = j;
        }
        if let Some(r) = o.ramp {
            t.schedule.ramp = r;
        }
        if let Some(a) = o.adaptive {
            t.adaptive = a;
        }
        if let Some(r) = o.noise_rho {
            t.noise_rho = r;
        }
        if let Some(f) = o.fraction {
            t.data_fraction = f;
        }
        if let Some(s) = o.seed {
            t.seed = s;
        }
        if let Some(b) = o.baseline {
            t.baseline = b;
        }
        if let Some(d) = &o.data_dir {
            self.data_dir = d.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !manifest_path(&self.data_dir, TRAIN_SPLIT).exists() {
            return Err(LabError::Invalid(format!(
                "no training split in {}",
                self.data_dir.display()
            )));
        }
        if let Some(t) = &self.targets {
            if !t.exists() {
                return Err(LabError::Invalid(format!("target cache {} does not exist", t.display())));
            }
        }
        if !(self.whitening_floor > 0.0) {
            return Err(LabError::Invalid("whitening_floor must be positive".into()));
        }
        Ok(())
    }

    /// Loads splits and, when the alignment term is used, the targets.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let train = load_split(&self.data_dir, TRAIN_SPLIT)?;
        let eval = if manifest_path(&self.data_dir, EVAL_SPLIT).exists() {
            Some(load_split(&self.data_dir, EVAL_SPLIT)?)
        } else {
            None
        };
        let targets = if self.train.uses_text() {
            Some(self.targets_for(&train)?)
        } else {
            None
        };
        Ok(Prepared { train, eval, targets })
    }

    /// Like [`prepare`](Self::prepare), but loads targets whenever any of
    /// `lambdas` is positive, for runs that vary the weight.
    pub fn prepare_for_sweep(&self, lambdas: &[f64]) -> Result<Prepared> {
        let mut p = self.prepare()?;
        if p.targets.is_none() && lambdas.iter().any(|&l| l > 0.0) {
            p.targets = Some(self.targets_for(&p.train)?);
        }
        Ok(p)
    }

    pub fn targets_for(&self, train: &Dataset) -> Result<WhitenedTargetSet> {
        match &self.targets {
            Some(path) => Ok(load_cache_with_dim(path, self.train.d_txt)?.into_targets()),
            None => pseudo_targets(train, self.train.d_txt, self.text_seed, self.whitening_floor),
        }
    }
}

/// Pseudo-encoded captions of `train`, whitened on the same split.
pub fn pseudo_targets(train: &Dataset, d_txt: usize, text_seed: u64, floor: f64) -> Result<WhitenedTargetSet> {
    let raw = RawEmbeddingSet::from_captions(
        train.samples.iter().map(|s| (s.id.as_str(), s.caption.as_str())),
        d_txt,
        text_seed,
    )?;
    Ok(WhitenedTargetSet::fit(&raw, floor)?)
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub eval: Option<Dataset>,
    pub targets: Option<WhitenedTargetSet>,
}
