//! Run configuration: one JSON document covering every stage. Missing fields
//! take their defaults; command-line flags override file values, and the
//! effective result is echoed into each artifact.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use moeprune::calibration::CountMode;
use moeprune::distill::KDConfig;
use moeprune::pruning::{Method, Propagate, DEFAULT_DAMP};
use moeprune::train::TrainConfig;
use moeprune::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub nsamples: usize,
    pub seed: u64,
    pub count_mode: CountMode,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            nsamples: 128,
            seed: 0,
            count_mode: CountMode::Argmax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSettings {
    pub method: Method,
    /// `"0.5"` for unstructured or `"2:4"` for N:M.
    pub target: String,
    pub propagate: Propagate,
    pub damp: f64,
    pub weight_update: bool,
    pub gate_scaled_hessian: bool,
}

impl Default for PruneSettings {
    fn default() -> Self {
        PruneSettings {
            method: Method::MoePruner,
            target: "0.5".into(),
            propagate: Propagate::Dense,
            damp: DEFAULT_DAMP,
            weight_update: true,
            gate_scaled_hessian: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub prune: PruneSettings,
    pub distill: KDConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}
