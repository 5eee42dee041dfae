//! Expert load balance: the coefficient of variation of per-expert dispatch
//! counts, per layer and averaged over layers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{build_calibration_set, collect, CollectOptions, CountMode};
use crate::error::{Error, Result};
use crate::model::MoEModel;

/// `σ / μ` of `f` with the population standard deviation. Zero means every
/// expert received the same load; the maximum `sqrt(n - 1)` means one expert
/// received everything.
pub fn balance_score(f: &[f64]) -> Result<f64> {
    if f.is_empty() || f.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input(
            "frequencies must be a nonempty vector of finite nonnegative values".into(),
        ));
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Input(
            "balance score is undefined for all-zero loads".into(),
        ));
    }
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub model_name: String,
    pub mode: CountMode,
    pub frequencies: Vec<Vec<f64>>,
    pub layer_scores: Vec<f64>,
    /// Unweighted mean of the layer scores.
    pub score: f64,
}

impl BalanceReport {
    pub fn from_frequencies(
        model_name: &str,
        mode: CountMode,
        layers: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input(format!("{model_name}: no layers")));
        }
        let layer_scores = layers
            .iter()
            .map(|f| balance_score(f))
            .collect::<Result<Vec<_>>>()?;
        let score = layer_scores.iter().sum::<f64>() / layer_scores.len() as f64;
        Ok(BalanceReport {
            model_name: model_name.to_string(),
            mode,
            frequencies: layers,
            layer_scores,
            score,
        })
    }
}

/// Routes `nsamples` seeded corpus windows through the model and scores the
/// resulting dispatch counts.
pub fn analyze_model(
    model: &MoEModel,
    corpus: &[u8],
    nsamples: usize,
    seed: u64,
    mode: CountMode,
) -> Result<BalanceReport> {
    let cal = build_calibration_set(corpus, nsamples, model.config.seq_len, seed)?;
    let opts = CollectOptions {
        count_mode: mode,
        skip_hessians: true,
        ..Default::default()
    };
    let stats = collect(model, &cal, &opts)?;
    let layers = stats
        .frequencies
        .layers
        .iter()
        .map(|l| l.iter().map(|&c| c as f64).collect())
        .collect();
    BalanceReport::from_frequencies("model", mode, layers)
}

#[derive(Deserialize)]
struct FrequencyFile {
    model_name: String,
    layers: Vec<Vec<f64>>,
    #[serde(default)]
    mode: CountMode,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FrequencyInput {
    One(FrequencyFile),
    Many(Vec<FrequencyFile>),
}

/// Parses externally measured dispatch counts: either one
/// `{"model_name", "layers": [[f_0, ..], ..]}` object or an array of them.
pub fn parse_frequencies(text: &str) -> Result<Vec<BalanceReport>> {
    let input: FrequencyInput =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("frequency file: {e}")))?;
    let files = match input {
        FrequencyInput::One(f) => vec![f],
        FrequencyInput::Many(v) => v,
    };
    files
        .into_iter()
        .map(|f| {
            let width = f.layers.first().map_or(0, Vec::len);
            if f.layers.iter().any(|l| l.len() != width) {
                return Err(Error::Format(format!(
                    "{}: layers have differing expert counts",
                    f.model_name
                )));
            }
            BalanceReport::from_frequencies(&f.model_name, f.mode, f.layers)
        })
        .collect()
}

pub fn ingest_frequencies(path: &Path) -> Result<Vec<BalanceReport>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_frequencies(&text)
}
