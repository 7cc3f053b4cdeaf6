//! Versioned JSON checkpoints for networks, trained models and adapted
//! classifiers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sfb_core::adaptation::{LearnerParams, PseudoLabelStats, RoundDiagnostics};
use sfb_core::calibration::Temperature;
use sfb_core::nn::{AdamState, DenseNet, LayerShape};
use sfb_core::training::{LinearHead, SfbModel};

use crate::config::UnstableFeatures;
use crate::error::{HarnessError, Stage, StageExt};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network layer shapes, flat row-major parameters and optional Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub layers: Vec<LayerShape>,
    pub params: Vec<f64>,
    pub dropout_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl NetCheckpoint {
    pub fn from_net(net: &DenseNet, optimizer: Option<AdamState>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            layers: net.layers().to_vec(),
            params: net.params().to_vec(),
            dropout_p: net.dropout_p(),
            optimizer,
        }
    }

    pub fn to_net(&self) -> Result<DenseNet, HarnessError> {
        check_version(self.version)?;
        DenseNet::from_parts(self.layers.clone(), self.params.clone(), self.dropout_p).stage(Stage::Evaluate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub trunk: NetCheckpoint,
    pub dim_s: usize,
    pub num_classes: usize,
    pub stable_head: LinearHead,
    pub unstable_heads: BTreeMap<usize, LinearHead>,
    pub train_prior: Vec<f64>,
    pub temperature: Temperature,
}

impl ModelCheckpoint {
    pub fn from_model(model: &SfbModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            trunk: NetCheckpoint::from_net(&model.trunk, None),
            dim_s: model.dim_s,
            num_classes: model.num_classes,
            stable_head: model.stable_head.clone(),
            unstable_heads: model.unstable_heads.clone(),
            train_prior: model.train_prior.clone(),
            temperature: model.temperature,
        }
    }

    pub fn to_model(&self) -> Result<SfbModel, HarnessError> {
        check_version(self.version)?;
        Ok(SfbModel {
            trunk: self.trunk.to_net()?,
            dim_s: self.dim_s,
            num_classes: self.num_classes,
            stable_head: self.stable_head.clone(),
            unstable_heads: self.unstable_heads.clone(),
            train_prior: self.train_prior.clone(),
            temperature: self.temperature,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Binary,
    Multiclass,
}

impl Mode {
    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            Self::Binary
        } else {
            Self::Multiclass
        }
    }
}

/// Where the stable classifier of an adapted checkpoint comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableRef {
    /// Model checkpoint path, relative to the adapted checkpoint's directory.
    pub model: String,
    pub temperature: Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedCheckpoint {
    pub version: u32,
    pub mode: Mode,
    pub stats: PseudoLabelStats,
    pub prior: Vec<f64>,
    pub bias_correction: bool,
    pub stable_ref: StableRef,
    pub unstable_features: UnstableFeatures,
    pub unstable_params: LearnerParams,
    #[serde(default)]
    pub rounds: Vec<RoundDiagnostics>,
}

fn check_version(version: u32) -> Result<(), HarnessError> {
    if version == CHECKPOINT_VERSION {
        Ok(())
    } else {
        Err(HarnessError::format(Stage::Evaluate, format!("unsupported checkpoint version {version}")))
    }
}

pub fn save_json<T: Serialize>(value: &T, path: &Path, stage: Stage) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(stage, parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::format(stage, e))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::io(stage, path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(stage, path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::format(stage, format!("{}: {e}", path.display())))
}
