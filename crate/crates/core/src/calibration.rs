//! Calibration: stream token windows through a model and accumulate, per
//! expert weight matrix, the (optionally gate-scaled) squared input norms and
//! Gram matrices that the pruning metrics consume, plus dispatch counts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{expert_hidden, forward_with, ExpertTarget, MoEModel, ModelConfig, Projection};
use crate::numerics::{Matrix, SeededRng};
use crate::persistence::{bytes_to_f64s, f64s_to_bytes, read_container, write_container};

pub const STATS_MAGIC: &[u8; 8] = b"MOEPSTAT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub nsamples: usize,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Draws `nsamples` non-overlapping windows of `seq_len` bytes at seeded
/// random slots of the corpus.
pub fn build_calibration_set(
    corpus: &[u8],
    nsamples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if nsamples == 0 || seq_len == 0 {
        return Err(Error::Config(
            "nsamples and seq_len must be positive".into(),
        ));
    }
    let slots = corpus.len() / seq_len;
    if slots < nsamples {
        return Err(Error::Input(format!(
            "corpus of {} bytes holds {slots} windows of {seq_len}, need {nsamples}",
            corpus.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let sequences = rng
        .sample_distinct(slots, nsamples)
        .into_iter()
        .map(|s| crate::model::encode(&corpus[s * seq_len..(s + 1) * seq_len]))
        .collect();
    Ok(CalibrationSet {
        sequences,
        nsamples,
        seed,
    })
}

/// Per-feature sums of squared inputs for one expert matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledNormAccumulator {
    pub target: ExpertTarget,
    /// `Σ_t (x_tj · g_t)²`
    pub sum_sq: Vec<f64>,
    /// `Σ_t x_tj²` over the same routed tokens.
    pub unscaled_sum_sq: Vec<f64>,
    pub tokens_seen: usize,
}

impl ScaledNormAccumulator {
    pub fn new(target: ExpertTarget, d_in: usize) -> Self {
        ScaledNormAccumulator {
            target,
            sum_sq: vec![0.0; d_in],
            unscaled_sum_sq: vec![0.0; d_in],
            tokens_seen: 0,
        }
    }

    /// Adds the rows of `x` with their gate weights, in row order.
    pub fn add_tokens(&mut self, x: &Matrix, gates: &[f64]) -> Result<()> {
        if x.cols() != self.sum_sq.len() || x.rows() != gates.len() {
            return Err(Error::shape(format!(
                "{} tokens of width {} with {} gates into accumulator of width {}",
                x.rows(),
                x.cols(),
                gates.len(),
                self.sum_sq.len()
            )));
        }
        for (t, &g) in gates.iter().enumerate() {
            for ((s, u), &v) in self
                .sum_sq
                .iter_mut()
                .zip(self.unscaled_sum_sq.iter_mut())
                .zip(x.row(t))
            {
                let scaled = v * g;
                *s += scaled * scaled;
                *u += v * v;
            }
        }
        self.tokens_seen += gates.len();
        Ok(())
    }

    /// `‖X_j · Gate_j‖` per input feature.
    pub fn scaled_norms(&self) -> Vec<f64> {
        self.sum_sq.iter().map(|s| s.sqrt()).collect()
    }

    /// `‖X_j‖` per input feature.
    pub fn norms(&self) -> Vec<f64> {
        self.unscaled_sum_sq.iter().map(|s| s.sqrt()).collect()
    }
}

/// Gram matrix `XᵀX` of the inputs one expert matrix saw.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianAccumulator {
    pub target: ExpertTarget,
    pub h: Matrix,
}

impl HessianAccumulator {
    pub fn new(target: ExpertTarget, d_in: usize) -> Self {
        HessianAccumulator {
            target,
            h: Matrix::zeros(d_in, d_in),
        }
    }

    /// Adds `Σ_t w_t² x_t x_tᵀ`; pass unit weights for the plain Gram matrix.
    pub fn add_tokens(&mut self, x: &Matrix, weights: &[f64]) -> Result<()> {
        let d = self.h.rows();
        if x.cols() != d || x.rows() != weights.len() {
            return Err(Error::shape(format!(
                "{}x{} inputs into {d}x{d} Hessian",
                x.rows(),
                x.cols()
            )));
        }
        let h = self.h.data_mut();
        for (t, &w) in weights.iter().enumerate() {
            let row = x.row(t);
            let w2 = w * w;
            for i in 0..d {
                let a = row[i] * w2;
                if a == 0.0 {
                    continue;
                }
                for j in i..d {
                    h[i * d + j] += a * row[j];
                }
            }
        }
        // Accumulate the upper triangle, then mirror it.
        for i in 0..d {
            for j in 0..i {
                h[i * d + j] = h[j * d + i];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    /// One count per token, for its highest-probability expert.
    #[default]
    Argmax,
    /// One count per (token, selected expert) pair.
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub mode: CountMode,
    /// `layers[l][e]`: tokens counted for expert `e` of layer `l`.
    pub layers: Vec<Vec<u64>>,
}

impl FrequencyTable {
    pub fn new(mode: CountMode, n_layers: usize, n_experts: usize) -> Self {
        FrequencyTable {
            mode,
            layers: vec![vec![0; n_experts]; n_layers],
        }
    }

    pub fn record(&mut self, layer: usize, gates: &crate::model::GateMatrix) {
        let counts = &mut self.layers[layer];
        match self.mode {
            CountMode::Argmax => {
                for e in gates.argmax() {
                    counts[e] += 1;
                }
            }
            CountMode::TopK => {
                for (e, tokens) in gates.dispatch().iter().enumerate() {
                    counts[e] += tokens.len() as u64;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CollectOptions {
    /// Weight Hessian inputs by the gate as well. The plain SparseGPT
    /// baseline uses unscaled inputs.
    pub gate_scaled_hessian: bool,
    pub count_mode: CountMode,
    /// Replace every routed token's gate weight by 1 (router bypass).
    pub unit_gates: bool,
    /// Skip Hessians when the metric does not need them.
    pub skip_hessians: bool,
    /// Only accumulate these layers (all when `None`).
    pub layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStats {
    pub config: ModelConfig,
    pub norms: BTreeMap<ExpertTarget, ScaledNormAccumulator>,
    pub hessians: BTreeMap<ExpertTarget, HessianAccumulator>,
    pub frequencies: FrequencyTable,
    pub tokens: usize,
}

impl CalibrationStats {
    pub fn empty(config: &ModelConfig, mode: CountMode) -> Self {
        CalibrationStats {
            config: config.clone(),
            norms: BTreeMap::new(),
            hessians: BTreeMap::new(),
            frequencies: FrequencyTable::new(mode, config.n_layers, config.n_experts),
            tokens: 0,
        }
    }

    /// Errors unless these stats describe a model of `config`'s shape.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let mismatch = |what: &str| {
            Err(Error::shape(format!(
                "stats {what} do not match the model ({} layers x {} experts, d_model {}, d_ff {} \
                 vs {} x {}, {}, {})",
                self.config.n_layers,
                self.config.n_experts,
                self.config.d_model,
                self.config.d_ff,
                config.n_layers,
                config.n_experts,
                config.d_model,
                config.d_ff
            )))
        };
        if !self.config.same_architecture(config) {
            return mismatch("dimensions");
        }
        for t in self.norms.keys().chain(self.hessians.keys()) {
            if t.layer >= config.n_layers || t.expert >= config.n_experts {
                return mismatch("targets");
            }
        }
        Ok(())
    }
}

/// Streams every calibration sequence through the model once and
/// accumulates statistics for every expert matrix.
///
/// Inputs to `w_gate`/`w_up` are the normalized MoE-layer inputs of the
/// tokens routed to that expert; inputs to `w_down` are the SwiGLU
/// intermediates. Tokens are weighted by their normalized gate value.
pub fn collect(
    model: &MoEModel,
    cal: &CalibrationSet,
    opts: &CollectOptions,
) -> Result<CalibrationStats> {
    let cfg = &model.config;
    let layers: Vec<usize> = opts
        .layers
        .clone()
        .unwrap_or_else(|| (0..cfg.n_layers).collect());
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Config(format!("layer {l} out of range")));
    }
    let mut stats = CalibrationStats::empty(cfg, opts.count_mode);
    for &l in &layers {
        for t in ExpertTarget::in_layer(cfg, l) {
            let d = t.input_dim(cfg);
            stats.norms.insert(t, ScaledNormAccumulator::new(t, d));
            // w_gate and w_up see the same inputs; one Gram matrix serves both.
            if !opts.skip_hessians && t.proj != Projection::Up {
                stats.hessians.insert(t, HessianAccumulator::new(t, d));
            }
        }
    }
    for seq in &cal.sequences {
        if seq.iter().any(|&t| t >= cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "calibration tokens exceed model vocabulary {}",
                cfg.vocab_size
            )));
        }
        stats.tokens += seq.len();
        forward_with(model, seq, |l, x, out| {
            if !layers.contains(&l) {
                return Ok(());
            }
            stats.frequencies.record(l, &out.gates);
            for (e, idx) in out.dispatch.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let xs = x.gather_rows(idx);
                let gates: Vec<f64> = if opts.unit_gates {
                    vec![1.0; idx.len()]
                } else {
                    idx.iter().map(|&t| out.gates.values[(t, e)]).collect()
                };
                let hidden = expert_hidden(&xs, &model.moe_layers[l].experts[e])?;
                let ones = vec![1.0; idx.len()];
                let hess_w = if opts.gate_scaled_hessian {
                    &gates
                } else {
                    &ones
                };
                for proj in Projection::ALL {
                    let t = ExpertTarget::new(l, e, proj);
                    let input = if proj == Projection::Down {
                        &hidden
                    } else {
                        &xs
                    };
                    stats
                        .norms
                        .get_mut(&t)
                        .expect("target registered")
                        .add_tokens(input, &gates)?;
                    if let Some(h) = stats.hessians.get_mut(&t) {
                        h.add_tokens(input, hess_w)?;
                    }
                }
            }
            Ok(())
        })?;
    }
    let mut ups = Vec::new();
    for h in stats.hessians.values() {
        if h.target.proj == Projection::Gate {
            let mut up = h.clone();
            up.target.proj = Projection::Up;
            ups.push(up);
        }
    }
    for up in ups {
        stats.hessians.insert(up.target, up);
    }
    Ok(stats)
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEntry {
    kind: String,
    target: String,
    rows: usize,
    cols: usize,
    offset: usize,
    length: usize,
    #[serde(default)]
    tokens_seen: usize,
}

/// Writes stats as a MOEPSTAT container: JSON manifest plus raw f64 payload.
pub fn export_stats(stats: &CalibrationStats, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let mut push = |kind: &str, target: &ExpertTarget, rows, cols, values: &[f64], seen| {
        let offset = payload.len();
        f64s_to_bytes(values, &mut payload);
        entries.push(StatsEntry {
            kind: kind.into(),
            target: target.to_string(),
            rows,
            cols,
            offset,
            length: payload.len() - offset,
            tokens_seen: seen,
        });
    };
    for (t, acc) in &stats.norms {
        let d = acc.sum_sq.len();
        push("sum_sq", t, 1, d, &acc.sum_sq, acc.tokens_seen);
        push(
            "unscaled_sum_sq",
            t,
            1,
            d,
            &acc.unscaled_sum_sq,
            acc.tokens_seen,
        );
    }
    for (t, acc) in &stats.hessians {
        push("hessian", t, acc.h.rows(), acc.h.cols(), acc.h.data(), 0);
    }
    let manifest = json!({
        "config": stats.config,
        "tokens": stats.tokens,
        "frequencies": stats.frequencies,
        "entries": entries,
    });
    write_container(path, STATS_MAGIC, &manifest, &payload)
}

pub fn import_stats(path: &Path) -> Result<CalibrationStats> {
    let (manifest, payload) = read_container(path, STATS_MAGIC)?;
    let bad = |e: serde_json::Error| Error::Format(format!("{}: {e}", path.display()));
    let config: ModelConfig = serde_json::from_value(manifest["config"].clone()).map_err(bad)?;
    let frequencies: FrequencyTable =
        serde_json::from_value(manifest["frequencies"].clone()).map_err(bad)?;
    let entries: Vec<StatsEntry> =
        serde_json::from_value(manifest["entries"].clone()).map_err(bad)?;
    let tokens = manifest["tokens"]
        .as_u64()
        .ok_or_else(|| Error::Format("stats manifest lacks token count".into()))?
        as usize;
    let mut stats = CalibrationStats {
        config,
        norms: BTreeMap::new(),
        hessians: BTreeMap::new(),
        frequencies,
        tokens,
    };
    for e in entries {
        let target: ExpertTarget = e.target.parse()?;
        let bytes = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::Format(format!("entry {} extends past payload", e.target)))?;
        let values = bytes_to_f64s(bytes)?;
        if values.len() != e.rows * e.cols {
            return Err(Error::Format(format!(
                "entry {} has wrong length",
                e.target
            )));
        }
        match e.kind.as_str() {
            "sum_sq" | "unscaled_sum_sq" => {
                let acc = stats
                    .norms
                    .entry(target)
                    .or_insert_with(|| ScaledNormAccumulator::new(target, values.len()));
                acc.tokens_seen = e.tokens_seen;
                if e.kind == "sum_sq" {
                    acc.sum_sq = values;
                } else {
                    acc.unscaled_sum_sq = values;
                }
            }
            "hessian" => {
                stats.hessians.insert(
                    target,
                    HessianAccumulator {
                        target,
                        h: Matrix::from_vec(e.rows, e.cols, values)?,
                    },
                );
            }
            other => return Err(Error::Format(format!("unknown stats entry kind {other:?}"))),
        }
    }
    for (t, acc) in &stats.norms {
        if acc.sum_sq.len() != acc.unscaled_sum_sq.len() {
            return Err(Error::Format(format!(
                "norm vectors for {t} differ in length"
            )));
        }
    }
    Ok(stats)
}
