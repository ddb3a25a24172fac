//! Versioned TOML experiment configuration.
//!
//! ```toml
//! version = 1
//!
//! [model]
//! layer_sizes = [12, 6, 4]
//!
//! [data]
//! kind = "bars_stripes"
//! rows = 3
//! cols = 4
//! train_size = 64
//!
//! [train]
//! algorithm = "mfng"
//! learning_rate = 0.005
//! batch_size = 16
//! chains = 64
//! epochs = 30
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::eval::AisConfig;
use crate::optim::{TrainConfig, WeightInit};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetPolicy {
    /// Visible offsets at the training-data mean, hidden offsets at 0.5.
    #[default]
    Data,
    /// Every offset zero (an uncentered model).
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub offsets: OffsetPolicy,
    #[serde(default)]
    pub init: WeightInit,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSpec {
    BarsStripes {
        rows: usize,
        cols: usize,
        train_size: usize,
        #[serde(default)]
        test_size: usize,
        #[serde(default)]
        seed: u64,
    },
    RandomBernoulli {
        n_visible: usize,
        p: f64,
        train_size: usize,
        #[serde(default)]
        test_size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image files, binarised at `threshold`. Relative paths resolve
    /// against the config file's directory.
    Idx {
        train_images: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        /// Use only the first `train_subset` training images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_subset: Option<usize>,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

impl DataSpec {
    /// Visible size implied by the data settings, when known without reading files.
    pub fn n_visible(&self) -> Option<usize> {
        self.synthetic().map(|(k, ..)| k.n_visible())
    }

    /// `(kind, train_size, test_size, seed)` for synthetic data.
    pub fn synthetic(&self) -> Option<(SyntheticKind, usize, usize, u64)> {
        match *self {
            DataSpec::BarsStripes {
                rows,
                cols,
                train_size,
                test_size,
                seed,
            } => Some((SyntheticKind::BarsStripes { rows, cols }, train_size, test_size, seed)),
            DataSpec::RandomBernoulli {
                n_visible,
                p,
                train_size,
                test_size,
                seed,
            } => Some((
                SyntheticKind::RandomBernoulli { n_visible, p },
                train_size,
                test_size,
                seed,
            )),
            DataSpec::Idx { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AisSettings {
    pub n_particles: usize,
    pub n_betas: usize,
    /// Explicit schedule; overrides `n_betas` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for AisSettings {
    fn default() -> Self {
        Self {
            n_particles: 100,
            n_betas: 1000,
            betas: None,
            seed: 0,
        }
    }
}

impl AisSettings {
    pub fn to_config(&self) -> Result<AisConfig> {
        let config = match &self.betas {
            Some(b) => AisConfig {
                n_particles: self.n_particles,
                betas: b.clone(),
                seed: self.seed,
            },
            None => {
                if self.n_betas < 2 {
                    return Err(Error::Config("ais.n_betas must be >= 2".into()));
                }
                AisConfig::linear(self.n_particles, self.n_betas, self.seed)
            }
        };
        config.validate().map_err(|e| Error::Config(format!("ais: {e}")))?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Exact enumeration when the model is small enough, AIS otherwise.
    #[default]
    Auto,
    Exact,
    Ais,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Evaluate after every `every` epochs (and always after the last).
    pub every: usize,
    pub method: EvalMethod,
    /// Mean-field iterations for the variational bound reported with AIS.
    pub mean_field_iterations: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 1,
            method: EvalMethod::Auto,
            mean_field_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Checkpoint after every `checkpoint_every` epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ais: AisSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and resolves relative IDX paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Relative data and output paths are taken relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        if let Some(dir) = self.output.dir.as_mut().filter(|d| d.is_relative()) {
            *dir = base.join(&*dir);
        }
        if let DataSpec::Idx {
            train_images,
            test_images,
            ..
        } = &mut self.data
        {
            for p in std::iter::once(train_images).chain(test_images.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let sizes = &self.model.layer_sizes;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config(
                "model.layer_sizes must be a nonempty list of positive integers".into(),
            ));
        }
        if let WeightInit::Uniform { scale } = self.model.init {
            if !(scale >= 0.0) || !scale.is_finite() {
                return Err(Error::Config(format!("model.init.scale must be >= 0, got {scale}")));
            }
        }
        if let Some(nv) = self.data.n_visible() {
            if nv != sizes[0] {
                return Err(Error::Config(format!(
                    "data has {nv} visible units but model.layer_sizes[0] = {}",
                    sizes[0]
                )));
            }
        }
        match &self.data {
            DataSpec::Idx { threshold, .. } if !(0.0..=1.0).contains(threshold) => {
                return Err(Error::Config(format!(
                    "data.threshold must lie in [0, 1], got {threshold}"
                )));
            }
            DataSpec::Idx {
                train_subset: Some(0), ..
            } => {
                return Err(Error::Config("data.train_subset must be >= 1".into()));
            }
            DataSpec::RandomBernoulli { p, .. } if !(0.0..=1.0).contains(p) => {
                return Err(Error::Config(format!("data.p must lie in [0, 1], got {p}")));
            }
            _ => {}
        }
        if let Some((_, train_size, ..)) = self.data.synthetic() {
            if train_size == 0 {
                return Err(Error::Config("data.train_size must be >= 1".into()));
            }
        }
        self.train.validate()?;
        self.ais.to_config()?;
        if self.eval.every == 0 {
            return Err(Error::Config("eval.every must be >= 1".into()));
        }
        if self.eval.mean_field_iterations == 0 {
            return Err(Error::Config("eval.mean_field_iterations must be >= 1".into()));
        }
        Ok(())
    }
}
