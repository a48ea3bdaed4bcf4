use std::fmt;
use std::path::{Path, PathBuf};

use maflow::symmetry::{GroupKind, SymmetryMode};
use maflow::targets::IsingSpec;
use maflow::trainer::{Objective, TrainConfig};
use serde::Deserialize;

/// A problem with the run configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `mnist`/`idx`, `csv`, `two-moons`, `ring` or `mixture-of-8`.
    pub name: String,
    pub path: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub lambda: Option<f64>,
    /// Number of rows to draw (toy densities) or keep (files).
    pub size: Option<usize>,
    /// Seed for drawing toy data.
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingConfig {
    #[serde(rename = "L", alias = "side")]
    pub side: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    IsingSpec::CRITICAL_COUPLING
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// The `train` config file. Hyperparameters left out take the defaults of
/// the task: density estimation or the lattice model.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub ising: Option<IsingConfig>,
    #[serde(default)]
    pub output: OutputConfig,

    pub objective: Option<Objective>,
    pub epsilon: Option<f64>,
    #[serde(alias = "d")]
    pub steps: Option<usize>,
    #[serde(alias = "h")]
    pub hidden: Option<usize>,
    #[serde(alias = "B")]
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub symmetry: Option<GroupKind>,
    pub symmetry_mode: Option<SymmetryMode>,
    pub zero_init_output: Option<bool>,
    pub checkpoint_every: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Hyperparameters with task defaults filled in.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let objective = match (self.objective, &self.ising, &self.dataset) {
            (Some(o), _, _) => o,
            (None, Some(_), None) => Objective::Variational,
            (None, None, Some(_)) => Objective::Nll,
            (None, Some(_), Some(_)) => {
                return Err(ConfigError(
                    "config names both a dataset and a lattice; set `objective`".into(),
                ))
            }
            (None, None, None) => {
                return Err(ConfigError(
                    "config needs a `dataset` or an `ising` section".into(),
                ))
            }
        };
        let mut c = match objective {
            Objective::Nll => TrainConfig::default(),
            Objective::Variational => TrainConfig::ising(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        take!(
            objective,
            epsilon,
            steps,
            hidden,
            batch,
            epochs,
            steps_per_epoch,
            learning_rate,
            beta1,
            beta2,
            adam_epsilon,
            clip_norm,
            seed,
            symmetry,
            symmetry_mode,
            zero_init_output,
            checkpoint_every
        );
        if self.ising.is_none() && self.symmetry.is_none() {
            c.symmetry = GroupKind::None;
        }
        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(c)
    }
}
