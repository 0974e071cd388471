//! Experiment configuration files (TOML) and their validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{data_dir, SplitSpec};
use crate::error::{Error, Result};
use crate::learn::{MaskInit, ReconstructionConfig, TrainConfig};
use crate::masks::{MaskFamily, RailMode};
use crate::noise::NoiseModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reconstruct,
    Classify,
    OnnReconstruct,
    OnnClassify,
    Theory,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Reconstruct => "reconstruct",
            Task::Classify => "classify",
            Task::OnnReconstruct => "onn-reconstruct",
            Task::OnnClassify => "onn-classify",
            Task::Theory => "theory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// One fixed scene `x_j = (j + 1) / N`.
    Ramp { pixels: usize },
    /// `count` uniform random scenes, cycled over the trials.
    Uniform { pixels: usize, count: usize },
    /// Preprocessed MNIST: the first `train + validation` training images,
    /// shuffled and split, and the first `test` test images.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        train: usize,
        validation: usize,
        test: usize,
    },
    /// Labeled spectra, split into train/validation/test by fraction.
    Spectral {
        path: PathBuf,
        #[serde(default)]
        bands: Option<usize>,
        #[serde(default)]
        has_header: bool,
        train: f64,
        validation: f64,
    },
}

impl DatasetSpec {
    pub fn mnist_dir(dir: &Option<PathBuf>) -> PathBuf {
        dir.clone().unwrap_or_else(|| data_dir().join("mnist"))
    }

    fn is_labeled(&self) -> bool {
        matches!(self, DatasetSpec::Mnist { .. } | DatasetSpec::Spectral { .. })
    }
}

/// Settings of the mask-convergence run; noise, rail and photons come from
/// the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionSpec {
    pub side: usize,
    pub patterns: usize,
    pub regenerations: usize,
    pub init: MaskInit,
    pub freeze_eps: bool,
    pub snapshot_every: Option<usize>,
    pub histogram_bins: usize,
}

impl Default for ReconstructionSpec {
    fn default() -> Self {
        let d = ReconstructionConfig::default();
        Self {
            side: d.side,
            patterns: d.patterns,
            regenerations: d.regenerations,
            init: d.init,
            freeze_eps: d.freeze_eps,
            snapshot_every: d.snapshot_every,
            histogram_bins: d.histogram_bins,
        }
    }
}

fn default_trials() -> usize {
    1
}

fn default_open() -> f64 {
    0.5
}

fn default_noise() -> String {
    "poisson".into()
}

fn default_rail() -> String {
    "dual1".into()
}

/// Decade grid `10¹ … 10¹⁰`.
pub fn decade_budgets() -> Vec<f64> {
    (1..=10).map(|e| 10f64.powi(e)).collect()
}

/// Reduced grid for classification sweeps.
pub fn classification_budgets() -> Vec<f64> {
    vec![1e3, 1e5, 1e7, 1e9]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Monte Carlo trials per cell (reconstruct) or independent training
    /// seeds (classification and ONN tasks).
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub families: Vec<String>,
    /// Mask count `m` for truncated, random, PCA and learned families.
    #[serde(default)]
    pub masks: Option<usize>,
    #[serde(default = "default_open")]
    pub open_probability: f64,
    /// Extra mask files evaluated alongside the generated families.
    #[serde(default)]
    pub mask_files: Vec<PathBuf>,
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default = "default_rail")]
    pub rail: String,
    /// Total photons per cell; omitted means the task's default grid.
    #[serde(default)]
    pub budgets: Option<Vec<f64>>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reconstruction: ReconstructionSpec,
    #[serde(default)]
    pub onn_init: Option<MaskInit>,
}

/// A validated configuration with parsed fields and its hash.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub families: Vec<MaskFamily>,
    pub noise: NoiseModel,
    pub rail: RailMode,
    pub budgets: Vec<f64>,
    /// SHA-256 of the canonical JSON form of `config`.
    pub hash: String,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&canonical);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(self) -> Result<Experiment> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(field_err("id", "must be nonempty and use only [A-Za-z0-9._-]"));
        }
        if self.trials == 0 {
            return Err(field_err("trials", "must be positive"));
        }
        let noise: NoiseModel = self.noise.parse().map_err(|e| field_err("noise", e))?;
        let rail: RailMode = self.rail.parse().map_err(|e| field_err("rail", e))?;
        let families = self
            .families
            .iter()
            .map(|f| f.parse::<MaskFamily>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| field_err("families", e))?;
        let budgets = match &self.budgets {
            Some(b) if b.is_empty() => return Err(field_err("budgets", "must not be empty")),
            Some(b) => b.clone(),
            None => match self.task {
                Task::Classify | Task::OnnClassify => classification_budgets(),
                Task::OnnReconstruct => vec![ReconstructionConfig::default().total_photons],
                _ => decade_budgets(),
            },
        };
        if let Some(bad) = budgets.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(field_err("budgets", format!("must be positive and finite, got {bad}")));
        }
        if !(self.open_probability > 0.0 && self.open_probability < 1.0) {
            return Err(field_err("open_probability", "must lie in (0, 1)"));
        }
        if self.masks == Some(0) {
            return Err(field_err("masks", "must be positive"));
        }
        for f in &self.mask_files {
            if !f.exists() {
                return Err(field_err("mask_files", format!("{} does not exist", f.display())));
            }
        }
        self.train.validate()?;
        self.check_task(&families)?;
        self.check_dataset()?;
        let hash = self.hash()?;
        Ok(Experiment {
            config: self,
            families,
            noise,
            rail,
            budgets,
            hash,
        })
    }

    fn check_task(&self, families: &[MaskFamily]) -> Result<()> {
        match self.task {
            Task::Reconstruct | Task::Classify => {
                if families.is_empty() && self.mask_files.is_empty() {
                    return Err(field_err("families", "list at least one family or mask file"));
                }
                if families.contains(&MaskFamily::Learned) {
                    return Err(field_err("families", "learned masks are given through `mask_files`"));
                }
                // reconstruction always uses square sets
                let needs_m = families
                    .iter()
                    .any(|f| matches!(f, MaskFamily::TruncatedHadamard | MaskFamily::Pca | MaskFamily::BinaryRandom));
                if self.task == Task::Classify && needs_m && self.masks.is_none() {
                    return Err(field_err("masks", "required by the truncated, random or PCA family"));
                }
            }
            Task::OnnClassify => {
                if self.masks.is_none() {
                    return Err(field_err("masks", "required by onn-classify"));
                }
            }
            Task::OnnReconstruct => {
                let r = &self.reconstruction;
                if r.side == 0 || r.patterns == 0 || r.regenerations == 0 {
                    return Err(field_err("reconstruction", "side, patterns and regenerations must be positive"));
                }
            }
            Task::Theory => {}
        }
        Ok(())
    }

    fn check_dataset(&self) -> Result<()> {
        let needs_labels = matches!(self.task, Task::Classify | Task::OnnClassify);
        let ds = match (&self.dataset, self.task) {
            (None, Task::OnnReconstruct) => return Ok(()),
            (None, _) => return Err(field_err("dataset", "required by this task")),
            (Some(ds), _) => ds,
        };
        if needs_labels && !ds.is_labeled() {
            return Err(field_err("dataset.kind", "classification needs a labeled dataset (mnist or spectral)"));
        }
        if self.task == Task::Theory && ds.is_labeled() {
            return Err(field_err("dataset.kind", "theory uses a ramp or uniform scene"));
        }
        match ds {
            DatasetSpec::Ramp { pixels } | DatasetSpec::Uniform { pixels, .. } if *pixels == 0 => {
                Err(field_err("dataset.pixels", "must be positive"))
            }
            DatasetSpec::Uniform { count: 0, .. } => Err(field_err("dataset.count", "must be positive")),
            DatasetSpec::Mnist { dir, train, validation, test } => {
                if *train == 0 || *validation == 0 || *test == 0 {
                    return Err(field_err("dataset", "train, validation and test counts must be positive"));
                }
                let d = DatasetSpec::mnist_dir(dir);
                if !d.is_dir() {
                    return Err(field_err("dataset.dir", format!("{} is not a directory", d.display())));
                }
                Ok(())
            }
            DatasetSpec::Spectral { path, train, validation, .. } => {
                if !path.exists() {
                    return Err(field_err("dataset.path", format!("{} does not exist", path.display())));
                }
                SplitSpec::new(*train, *validation, 0).map(|_| ()).map_err(|e| field_err("dataset", e))
            }
            _ => Ok(()),
        }
    }
}

impl Experiment {
    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// Seed of independent run `trial`.
    pub fn run_seed(&self, trial: usize) -> u64 {
        self.config.seed.wrapping_add(trial as u64)
    }
}
