//! Experiment configuration: one JSON document per experiment, optionally
//! fanned out into several runs by a `sweep` array.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfcal_core::bilevel::{BilevelConfig, DEFAULT_CLAMP_EPS};
use selfcal_core::calibration::DEFAULT_BINS;
use selfcal_core::data::SplitSpec;
use selfcal_core::model::{Activation, MlpArchitecture, DEFAULT_BETA};
use selfcal_core::optim::AdamConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Standard,
    Isoreg,
    Bo4sc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Isoreg => "isoreg",
            Method::Bo4sc => "bo4sc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_n() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_n")]
        n: usize,
        classes: usize,
        std: f64,
    },
    Spirals {
        #[serde(default = "default_n")]
        n: usize,
        noise_std: f64,
    },
    BacSim {
        #[serde(default = "default_n")]
        n: usize,
    },
    /// Relative paths are resolved against the config file's directory.
    Csv {
        path: PathBuf,
        /// Defaults to one more than the largest label in the file.
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl DatasetSpec {
    /// Short name used for output directories and report rows.
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Blobs { std, .. } => format!("blobs-{std}"),
            DatasetSpec::Spirals { noise_std, .. } => format!("spirals-{noise_std}"),
            DatasetSpec::BacSim { .. } => "bac-sim".to_string(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".to_string()),
        }
    }

    /// Sample count, when known without reading a file.
    pub fn sample_count(&self) -> Option<usize> {
        match *self {
            DatasetSpec::Blobs { n, .. }
            | DatasetSpec::Spirals { n, .. }
            | DatasetSpec::BacSim { n } => Some(n),
            DatasetSpec::Csv { .. } => None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            DatasetSpec::Blobs { n, classes, std } => {
                if classes < 2 {
                    return Err(format!("blobs need at least 2 classes, got {classes}"));
                }
                if n < classes {
                    return Err(format!("blobs need n >= classes, got n = {n}"));
                }
                if !(std > 0.0 && std.is_finite()) {
                    return Err(format!("blob std must be positive, got {std}"));
                }
            }
            DatasetSpec::Spirals { n, noise_std } => {
                if n < 2 || !n.is_multiple_of(2) {
                    return Err(format!("spirals need an even n >= 2, got {n}"));
                }
                if !(noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(format!(
                        "spiral noise must be non-negative, got {noise_std}"
                    ));
                }
            }
            DatasetSpec::BacSim { n } => {
                if n < 2 {
                    return Err(format!("bac-sim needs n >= 2, got {n}"));
                }
            }
            DatasetSpec::Csv {
                ref path,
                num_classes,
            } => {
                if path.as_os_str().is_empty() {
                    return Err("csv dataset path is empty".into());
                }
                if num_classes.is_some_and(|c| c < 2) {
                    return Err("csv num_classes must be at least 2".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub hidden_layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub boltzmann_beta: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            hidden_layer_sizes: vec![32, 32],
            activation: Activation::Relu,
            boltzmann_beta: DEFAULT_BETA,
        }
    }
}

impl ArchitectureConfig {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> MlpArchitecture {
        MlpArchitecture::new(input_dim, self.hidden_layer_sizes.clone(), num_classes)
            .with_activation(self.activation)
            .with_beta(self.boltzmann_beta)
    }
}

/// Full-batch Adam on the unweighted loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clamp_eps: f64,
}

impl Default for StandardConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        StandardConfig {
            epochs: 500,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

impl StandardConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!(
                "standard.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("standard.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!(
                "standard.epsilon must be positive, got {}",
                self.epsilon
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(format!(
                "standard.clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            ));
        }
        Ok(())
    }
}

/// Overrides for one run of a sweep. Unset fields keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub name: Option<String>,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label in output paths and reports; derived from the dataset
    /// spec when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    pub method: Method,
    #[serde(default)]
    pub standard: StandardConfig,
    #[serde(default)]
    pub bo4sc: BilevelConfig,
    /// Reliability bins for ECE.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Seeds data generation, the split and initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A relative CSV dataset path is
    /// rebased onto the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let DatasetSpec::Csv { path: csv, .. } = &mut cfg.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.dataset.label())
    }

    /// Applies command-line overrides. A seed override collapses any sweep
    /// into a single run with that seed.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
            for entry in &mut self.sweep {
                entry.seed = Some(seed);
            }
            let mut seen = BTreeSet::new();
            self.sweep
                .retain(|e| seen.insert((e.method, e.name.clone())));
        }
        if let Some(out) = out {
            self.output_dir = out;
        }
        self
    }

    /// One single-run config per sweep entry, or `self` when there is no sweep.
    pub fn runs(&self) -> Vec<ExperimentConfig> {
        if self.sweep.is_empty() {
            return vec![self.clone()];
        }
        self.sweep
            .iter()
            .map(|entry| ExperimentConfig {
                name: entry.name.clone().or_else(|| self.name.clone()),
                method: entry.method.unwrap_or(self.method),
                seed: entry.seed.unwrap_or(self.seed),
                sweep: Vec::new(),
                ..self.clone()
            })
            .collect()
    }

    /// `<output_dir>/<label>/<method>/seed-<seed>`.
    pub fn run_dir(&self, method: Method) -> PathBuf {
        self.output_dir
            .join(self.label())
            .join(method.as_str())
            .join(format!("seed-{}", self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(HarnessError::Config)
    }

    fn check(&self) -> std::result::Result<(), String> {
        check_name(&self.label())?;
        self.dataset.validate()?;
        let s = self.split;
        if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
            return Err(format!(
                "split counts must be positive, got {}/{}/{}",
                s.n_train, s.n_val, s.n_test
            ));
        }
        if let Some(n) = self.dataset.sample_count() {
            if s.total() != n {
                return Err(format!(
                    "split {}/{}/{} does not add up to the {n} generated samples",
                    s.n_train, s.n_val, s.n_test
                ));
            }
        }
        let arch = &self.architecture;
        if arch.hidden_layer_sizes.contains(&0) {
            return Err("hidden layer sizes must be positive".into());
        }
        if !(arch.boltzmann_beta > 0.0 && arch.boltzmann_beta.is_finite()) {
            return Err(format!(
                "boltzmann_beta must be positive, got {}",
                arch.boltzmann_beta
            ));
        }
        self.standard.validate()?;
        self.bo4sc.validate().map_err(|e| format!("bo4sc: {e}"))?;
        if self.bins == 0 {
            return Err("bins must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for run in self.runs() {
            check_name(&run.label())?;
            if !seen.insert((run.label(), run.method, run.seed)) {
                return Err(format!(
                    "sweep repeats {} / {} / seed {}",
                    run.label(),
                    run.method,
                    run.seed
                ));
            }
        }
        Ok(())
    }
}

fn check_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) {
        Err(format!("`{name}` is not usable as a directory name"))
    } else {
        Ok(())
    }
}
