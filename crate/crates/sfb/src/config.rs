//! Experiment configuration files.
//!
//! One TOML file describes one experiment. See `configs/` for the bundled
//! recipes and the README for the full schema.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfb_core::adaptation::StatsPolicy;
use sfb_core::calibration::{DEFAULT_BINS, DEFAULT_GRID};
use sfb_core::envs::GeneratorTag;
use sfb_core::training::TrainConfig;

use crate::error::HarnessError;

/// Environment variable naming the directory that holds the MNIST files.
pub const DATA_DIR_ENV: &str = "SFB_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "MethodName::all")]
    pub methods: Vec<MethodName>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Environment parameters per split. For the synthetic generators the
/// values are `beta`; for ColorMNIST they are color-noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: GeneratorTag,
    pub train: Vec<f64>,
    pub validation: f64,
    pub test: f64,
    #[serde(default = "default_n")]
    pub n_train: usize,
    #[serde(default = "default_n")]
    pub n_validation: usize,
    #[serde(default = "default_n")]
    pub n_test: usize,
    /// ColorMNIST label-flip probability.
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    /// Directory with the MNIST IDX files; falls back to `SFB_DATA_DIR`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

fn default_n() -> usize {
    1000
}

fn default_label_noise() -> f64 {
    sfb_core::envs::CMNIST_LABEL_NOISE
}

/// Grid of penalty weights; each point is trained and the best one on the
/// validation split is kept. Empty lists use the value in `[train]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default)]
    pub lambda_s: Vec<f64>,
    #[serde(default)]
    pub lambda_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { grid: DEFAULT_GRID.to_vec(), bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    #[default]
    Logistic,
    Tabular,
    Mlp,
}

/// Which features the unstable learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnstableFeatures {
    /// The unstable half of the learned representation.
    #[default]
    Representation,
    /// Logits of the training-environment unstable heads.
    HeadLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub learner: LearnerKind,
    pub features: UnstableFeatures,
    /// Hidden widths of the `mlp` learner.
    pub hidden: Vec<usize>,
    pub rounds: usize,
    pub lr: f64,
    /// Adaptation steps are chosen in `1..=max_steps` on the validation split.
    pub max_steps: usize,
    pub l2: f64,
    pub stats_policy: StatsPolicy,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            learner: LearnerKind::Logistic,
            features: UnstableFeatures::Representation,
            hidden: vec![8],
            rounds: 1,
            lr: 0.1,
            max_steps: 20,
            l2: 0.0,
            stats_policy: StatsPolicy::Reestimate,
        }
    }
}

/// Test-domain axis for `sfb sweep`: `beta` values for the synthetic
/// generators, color-label correlations for ColorMNIST.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub values: Vec<f64>,
    /// Also write a text plot next to the CSV.
    #[serde(default)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodName {
    #[serde(rename = "erm")]
    Erm,
    #[serde(rename = "irm")]
    Irm,
    #[serde(rename = "sfb-no-adapt")]
    SfbNoAdapt,
    #[serde(rename = "sfb")]
    Sfb,
    #[serde(rename = "pl-naive")]
    PlNaive,
    #[serde(rename = "gt-adapt")]
    GtAdapt,
    #[serde(rename = "oracle")]
    Oracle,
}

impl MethodName {
    pub const ALL: [MethodName; 7] =
        [Self::Erm, Self::Irm, Self::SfbNoAdapt, Self::Sfb, Self::PlNaive, Self::GtAdapt, Self::Oracle];

    pub fn all() -> Vec<MethodName> {
        Self::ALL.to_vec()
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Erm => "ERM",
            Self::Irm => "IRM",
            Self::SfbNoAdapt => "SFB-no-adapt",
            Self::Sfb => "SFB",
            Self::PlNaive => "PL-naive",
            Self::GtAdapt => "GT-adapt",
            Self::Oracle => "Oracle",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == label)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            HarnessError::Config { field, message: e.into_inner().message().trim().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            field: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, message: &str| {
            Err(HarnessError::Config { field: field.to_string(), message: message.to_string() })
        };
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.dataset.train.len() < 2 {
            return bad("dataset.train", "at least two training environments are required");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.dataset.train.iter().all(|v| unit(*v)) {
            return bad("dataset.train", "environment parameters must lie in [0, 1]");
        }
        if !unit(self.dataset.validation) {
            return bad("dataset.validation", "environment parameter must lie in [0, 1]");
        }
        if !unit(self.dataset.test) {
            return bad("dataset.test", "environment parameter must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dataset.label_noise) {
            return bad("dataset.label_noise", "must lie in [0, 1)");
        }
        if self.dataset.n_train == 0 || self.dataset.n_validation == 0 || self.dataset.n_test == 0 {
            return bad("dataset.n_train", "split sizes must be positive");
        }
        if let Err(e) = self.train.validate() {
            return bad("train", &e.to_string());
        }
        if self.search.lambda_s.iter().chain(&self.search.lambda_c).any(|v| !(*v >= 0.0)) {
            return bad("search", "penalty weights must be nonnegative");
        }
        if self.calibration.grid.is_empty() || self.calibration.grid.iter().any(|t| !(*t > 0.0)) {
            return bad("calibration.grid", "temperatures must be positive and the grid nonempty");
        }
        if self.calibration.bins == 0 {
            return bad("calibration.bins", "must be positive");
        }
        if self.adaptation.rounds == 0 {
            return bad("adaptation.rounds", "must be positive");
        }
        if self.adaptation.max_steps == 0 {
            return bad("adaptation.max_steps", "must be positive");
        }
        if !(self.adaptation.lr > 0.0) {
            return bad("adaptation.lr", "must be positive");
        }
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required");
        }
        Ok(())
    }

    /// `(lambda_s, lambda_c)` points to train.
    pub fn search_grid(&self) -> Vec<(f64, f64)> {
        let ls = if self.search.lambda_s.is_empty() { vec![self.train.lambda_s] } else { self.search.lambda_s.clone() };
        let lc = if self.search.lambda_c.is_empty() { vec![self.train.lambda_c] } else { self.search.lambda_c.clone() };
        ls.iter().flat_map(|s| lc.iter().map(move |c| (*s, *c))).collect()
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.dataset.data_dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    pub fn wants(&self, m: MethodName) -> bool {
        self.methods.contains(&m)
    }
}
