//! Toy MoE transformer: byte tokens, pre-norm causal attention and routed
//! SwiGLU experts in place of the feed-forward block.
//!
//! Expert projections are stored output-major (`out x in`), the way linear
//! layers usually keep them, so that one matrix row is one output neuron and
//! its columns are the input features. Pruning compares weights along rows.
//! All other matrices are applied as `x · W`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{attention_forward, log_softmax_at, rms_norm_forward, MASKED_LOGIT};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, silu_scalar, softmax_in_place, Matrix, SeededRng};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of MoE layers.
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Expert hidden width.
    pub d_ff: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Initialize every expert of a layer as a copy of the first one.
    pub upcycle: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 128,
            seq_len: 64,
            seed: 0,
            upcycle: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// True when two configs describe interchangeable parameter sets.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.n_heads == other.n_heads
            && self.n_layers == other.n_layers
            && self.n_experts == other.n_experts
            && self.top_k == other.top_k
            && self.d_ff == other.d_ff
            && self.seq_len == other.seq_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Gate, Projection::Up, Projection::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Gate => "w_gate",
            Projection::Up => "w_up",
            Projection::Down => "w_down",
        }
    }
}

/// Address of one expert weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertTarget {
    pub layer: usize,
    pub expert: usize,
    pub proj: Projection,
}

impl ExpertTarget {
    pub fn new(layer: usize, expert: usize, proj: Projection) -> Self {
        ExpertTarget {
            layer,
            expert,
            proj,
        }
    }

    /// Every expert matrix of a model in canonical order.
    pub fn all(cfg: &ModelConfig) -> Vec<ExpertTarget> {
        let mut out = Vec::with_capacity(cfg.n_layers * cfg.n_experts * 3);
        for layer in 0..cfg.n_layers {
            out.extend(Self::in_layer(cfg, layer));
        }
        out
    }

    pub fn in_layer(cfg: &ModelConfig, layer: usize) -> Vec<ExpertTarget> {
        let mut out = Vec::with_capacity(cfg.n_experts * 3);
        for expert in 0..cfg.n_experts {
            for proj in Projection::ALL {
                out.push(ExpertTarget::new(layer, expert, proj));
            }
        }
        out
    }

    /// Width of the input features this matrix consumes.
    pub fn input_dim(&self, cfg: &ModelConfig) -> usize {
        match self.proj {
            Projection::Gate | Projection::Up => cfg.d_model,
            Projection::Down => cfg.d_ff,
        }
    }

    pub fn shape(&self, cfg: &ModelConfig) -> (usize, usize) {
        match self.proj {
            Projection::Gate | Projection::Up => (cfg.d_ff, cfg.d_model),
            Projection::Down => (cfg.d_model, cfg.d_ff),
        }
    }
}

impl fmt::Display for ExpertTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers.{}.experts.{}.{}",
            self.layer,
            self.expert,
            self.proj.as_str()
        )
    }
}

impl FromStr for ExpertTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("not an expert parameter name: {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 5 || parts[0] != "layers" || parts[2] != "experts" {
            return Err(bad());
        }
        let layer = parts[1].parse().map_err(|_| bad())?;
        let expert = parts[3].parse().map_err(|_| bad())?;
        let proj = match parts[4] {
            "w_gate" => Projection::Gate,
            "w_up" => Projection::Up,
            "w_down" => Projection::Down,
            _ => return Err(bad()),
        };
        Ok(ExpertTarget::new(layer, expert, proj))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    /// `d_ff x d_model`
    pub w_gate: Matrix,
    /// `d_ff x d_model`
    pub w_up: Matrix,
    /// `d_model x d_ff`
    pub w_down: Matrix,
}

impl ExpertWeights {
    pub fn get(&self, proj: Projection) -> &Matrix {
        match proj {
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn get_mut(&mut self, proj: Projection) -> &mut Matrix {
        match proj {
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer {
    /// `d_model x n_experts`
    pub router: Matrix,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    /// `vocab x d_model`
    pub token_embedding: Matrix,
    /// `seq_len x d_model`, learned absolute positions.
    pub position_embedding: Matrix,
    pub attention: Vec<Attention>,
    pub moe_layers: Vec<MoELayer>,
    /// `d_model x vocab`
    pub lm_head: Matrix,
}

impl MoEModel {
    /// Gaussian initialization (std 0.02) from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let d = config.d_model;
        let token_embedding = rng.gaussian_matrix(config.vocab_size, d, INIT_STD);
        let position_embedding = rng.gaussian_matrix(config.seq_len, d, INIT_STD);
        let mut attention = Vec::with_capacity(config.n_layers);
        let mut moe_layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            attention.push(Attention {
                wq: rng.gaussian_matrix(d, d, INIT_STD),
                wk: rng.gaussian_matrix(d, d, INIT_STD),
                wv: rng.gaussian_matrix(d, d, INIT_STD),
                wo: rng.gaussian_matrix(d, d, INIT_STD),
            });
            let router = rng.gaussian_matrix(d, config.n_experts, INIT_STD);
            let mut experts = Vec::with_capacity(config.n_experts);
            for e in 0..config.n_experts {
                if config.upcycle && e > 0 {
                    let first: &ExpertWeights = &experts[0];
                    experts.push(first.clone());
                    continue;
                }
                experts.push(ExpertWeights {
                    w_gate: rng.gaussian_matrix(config.d_ff, d, INIT_STD),
                    w_up: rng.gaussian_matrix(config.d_ff, d, INIT_STD),
                    w_down: rng.gaussian_matrix(d, config.d_ff, INIT_STD),
                });
            }
            moe_layers.push(MoELayer { router, experts });
        }
        let lm_head = rng.gaussian_matrix(d, config.vocab_size, INIT_STD);
        Ok(MoEModel {
            config,
            token_embedding,
            position_embedding,
            attention,
            moe_layers,
            lm_head,
        })
    }

    /// Stable, unique parameter names in canonical order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (l, (attn, moe)) in self.attention.iter().zip(&self.moe_layers).enumerate() {
            out.push((format!("layers.{l}.attn.wq"), &attn.wq));
            out.push((format!("layers.{l}.attn.wk"), &attn.wk));
            out.push((format!("layers.{l}.attn.wv"), &attn.wv));
            out.push((format!("layers.{l}.attn.wo"), &attn.wo));
            out.push((format!("layers.{l}.router"), &moe.router));
            for (e, ex) in moe.experts.iter().enumerate() {
                for proj in Projection::ALL {
                    out.push((ExpertTarget::new(l, e, proj).to_string(), ex.get(proj)));
                }
            }
        }
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (l, (attn, moe)) in self
            .attention
            .iter_mut()
            .zip(self.moe_layers.iter_mut())
            .enumerate()
        {
            out.push((format!("layers.{l}.attn.wq"), &mut attn.wq));
            out.push((format!("layers.{l}.attn.wk"), &mut attn.wk));
            out.push((format!("layers.{l}.attn.wv"), &mut attn.wv));
            out.push((format!("layers.{l}.attn.wo"), &mut attn.wo));
            out.push((format!("layers.{l}.router"), &mut moe.router));
            for (e, ex) in moe.experts.iter_mut().enumerate() {
                let ExpertWeights {
                    w_gate,
                    w_up,
                    w_down,
                } = ex;
                out.push((
                    ExpertTarget::new(l, e, Projection::Gate).to_string(),
                    w_gate,
                ));
                out.push((ExpertTarget::new(l, e, Projection::Up).to_string(), w_up));
                out.push((
                    ExpertTarget::new(l, e, Projection::Down).to_string(),
                    w_down,
                ));
            }
        }
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn expert_matrix(&self, t: ExpertTarget) -> &Matrix {
        self.moe_layers[t.layer].experts[t.expert].get(t.proj)
    }

    pub fn expert_matrix_mut(&mut self, t: ExpertTarget) -> &mut Matrix {
        self.moe_layers[t.layer].experts[t.expert].get_mut(t.proj)
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Normalized router weights for a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    /// `tokens x n_experts`; exactly `top_k` nonzeros per row, rows sum to 1.
    pub values: Matrix,
    /// Raw router logits `x · W_g`.
    pub logits: Matrix,
}

impl GateMatrix {
    /// Softmax over all experts, before top-k selection.
    pub fn probabilities(&self) -> Matrix {
        crate::numerics::row_softmax(&self.logits)
    }

    /// Expert with the largest routing probability per token (lowest index on
    /// ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| top_k_indices(self.logits.row(r), 1)[0])
            .collect()
    }

    /// Token indices dispatched to each expert, ascending.
    pub fn dispatch(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.values.cols()];
        for t in 0..self.values.rows() {
            for (e, &g) in self.values.row(t).iter().enumerate() {
                if g != 0.0 {
                    out[e].push(t);
                }
            }
        }
        out
    }
}

/// Indices of the `k` largest entries, ordered by value descending; ties go
/// to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

/// Keep-mask of the top-k logits of every row.
pub fn top_k_keep(logits: &Matrix, k: usize) -> Vec<bool> {
    let mut keep = vec![false; logits.len()];
    for r in 0..logits.rows() {
        for c in top_k_indices(logits.row(r), k) {
            keep[r * logits.cols() + c] = true;
        }
    }
    keep
}

/// Top-k softmax gate: logits outside the top-k are masked before the
/// softmax, so unselected experts get exactly zero weight.
pub fn route(x: &Matrix, router: &Matrix, k: usize) -> Result<GateMatrix> {
    let n = router.cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k {k} must lie in 1..={n}")));
    }
    let logits = matmul(x, router)?;
    Ok(gates_from_logits(logits, k))
}

pub(crate) fn gates_from_logits(logits: Matrix, k: usize) -> GateMatrix {
    let keep = top_k_keep(&logits, k);
    let mut values = logits.clone();
    for (v, &kept) in values.data_mut().iter_mut().zip(&keep) {
        if !kept {
            *v = MASKED_LOGIT;
        }
    }
    for r in 0..values.rows() {
        softmax_in_place(values.row_mut(r));
    }
    GateMatrix { values, logits }
}

/// SwiGLU intermediate `silu(x·w_gateᵀ) ⊙ (x·w_upᵀ)`: the input seen by
/// `w_down`.
pub fn expert_hidden(x: &Matrix, e: &ExpertWeights) -> Result<Matrix> {
    let g = matmul_nt(x, &e.w_gate)?;
    let u = matmul_nt(x, &e.w_up)?;
    g.zip_map(&u, |a, b| silu_scalar(a) * b)
}

pub fn expert_forward(x: &Matrix, e: &ExpertWeights) -> Result<Matrix> {
    matmul_nt(&expert_hidden(x, e)?, &e.w_down)
}

/// Result of one routed layer with per-expert detail.
#[derive(Clone, Debug)]
pub struct MoELayerOutput {
    pub y: Matrix,
    pub gates: GateMatrix,
    /// Token indices each expert processed.
    pub dispatch: Vec<Vec<usize>>,
    /// Unscaled expert outputs, rows aligned with `dispatch`.
    pub expert_outputs: Vec<Matrix>,
}

pub fn moe_layer_forward(x: &Matrix, layer: &MoELayer, k: usize) -> Result<(Matrix, GateMatrix)> {
    let out = moe_layer_forward_detailed(x, layer, k)?;
    Ok((out.y, out.gates))
}

pub fn moe_layer_forward_detailed(
    x: &Matrix,
    layer: &MoELayer,
    k: usize,
) -> Result<MoELayerOutput> {
    if x.cols() != layer.router.rows() {
        return Err(Error::shape(format!(
            "MoE input width {} vs router {}x{}",
            x.cols(),
            layer.router.rows(),
            layer.router.cols()
        )));
    }
    let gates = route(x, &layer.router, k)?;
    debug_assert!(gate_rows_valid(&gates.values, k));
    let dispatch = gates.dispatch();
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut expert_outputs = Vec::with_capacity(layer.experts.len());
    for (e, (idx, weights)) in dispatch.iter().zip(&layer.experts).enumerate() {
        let out = expert_forward(&x.gather_rows(idx), weights)?;
        for (r, &t) in idx.iter().enumerate() {
            let g = gates.values[(t, e)];
            for (acc, v) in y.row_mut(t).iter_mut().zip(out.row(r)) {
                *acc += g * v;
            }
        }
        expert_outputs.push(out);
    }
    Ok(MoELayerOutput {
        y,
        gates,
        dispatch,
        expert_outputs,
    })
}

pub(crate) fn gate_rows_valid(g: &Matrix, k: usize) -> bool {
    (0..g.rows()).all(|r| {
        let row = g.row(r);
        let nz = row.iter().filter(|&&v| v != 0.0).count();
        let total: f64 = row.iter().sum();
        nz == k && (total - 1.0).abs() < 1e-12
    })
}

/// Per-layer activations captured during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Normalized hidden state entering the MoE layer.
    pub moe_input: Matrix,
    pub moe: MoELayerOutput,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Matrix,
    pub layers: Vec<LayerTrace>,
}

pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.seq_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Causal forward of one sequence, without a tape.
pub fn model_forward(model: &MoEModel, tokens: &[usize]) -> Result<ForwardTrace> {
    forward_with(model, tokens, |_, _, _| Ok(()))
}

/// Forward that runs `hook(layer, moe_input, &output)` after each MoE layer.
pub(crate) fn forward_with<F>(
    model: &MoEModel,
    tokens: &[usize],
    mut hook: F,
) -> Result<ForwardTrace>
where
    F: FnMut(usize, &Matrix, &MoELayerOutput) -> Result<()>,
{
    let cfg = &model.config;
    check_tokens(cfg, tokens)?;
    let len = tokens.len();
    let mut x = model.token_embedding.gather_rows(tokens);
    for t in 0..len {
        for (a, p) in x.row_mut(t).iter_mut().zip(model.position_embedding.row(t)) {
            *a += p;
        }
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, (attn, moe)) in model.attention.iter().zip(&model.moe_layers).enumerate() {
        let (a, _) = rms_norm_forward(&x);
        let q = matmul(&a, &attn.wq)?;
        let k = matmul(&a, &attn.wk)?;
        let v = matmul(&a, &attn.wv)?;
        let (ctx, _) = attention_forward(&q, &k, &v, cfg.n_heads, &[len]);
        x = x.add(&matmul(&ctx, &attn.wo)?)?;
        let (m, _) = rms_norm_forward(&x);
        let out = moe_layer_forward_detailed(&m, moe, cfg.top_k)?;
        hook(l, &m, &out)?;
        x = x.add(&out.y)?;
        layers.push(LayerTrace {
            moe_input: m,
            moe: out,
        });
    }
    let (h, _) = rms_norm_forward(&x);
    let logits = matmul(&h, &model.lm_head)?;
    Ok(ForwardTrace { logits, layers })
}

/// Logits only; skips keeping layer traces.
pub fn model_logits(model: &MoEModel, tokens: &[usize]) -> Result<Matrix> {
    Ok(model_forward(model, tokens)?.logits)
}

/// Mean next-token cross-entropy in nats.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Input(format!(
            "target {t} outside vocabulary of {}",
            logits.cols()
        )));
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| log_softmax_at(logits.row(r), t))
        .sum();
    Ok(-total / targets.len().max(1) as f64)
}

/// Byte-level tokenization: one token per byte.
pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 12,
            seq_len: 16,
            seed,
            upcycle: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(0).validate().is_ok());
        let mut c = tiny(0);
        c.top_k = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_parse() {
        let m = MoEModel::new(tiny(1)).unwrap();
        let names = m.parameter_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for t in ExpertTarget::all(&m.config) {
            let name = t.to_string();
            assert!(names.contains(&name));
            assert_eq!(name.parse::<ExpertTarget>().unwrap(), t);
            assert_eq!(m.param(&name).unwrap().shape(), t.shape(&m.config));
        }
        assert!("layers.0.router".parse::<ExpertTarget>().is_err());
    }

    #[test]
    fn route_examples() {
        let id2 = Matrix::identity(2);
        let g = route(&Matrix::from_rows(&[[0.0, 0.0]]), &id2, 2).unwrap();
        assert_eq!(g.values.data(), &[0.5, 0.5]);

        let id4 = Matrix::identity(4);
        let g = route(&Matrix::from_rows(&[[0.3, -1.0, 2.0, 0.1]]), &id4, 1).unwrap();
        assert_eq!(g.values.data(), &[0.0, 0.0, 1.0, 0.0]);

        let g = route(&Matrix::from_rows(&[[3.0, 1.0, 2.0, 0.0]]), &id4, 2).unwrap();
        let e = (1.0f64).exp();
        let (p0, p2) = (e / (e + 1.0), 1.0 / (e + 1.0));
        assert!((g.values[(0, 0)] - p0).abs() < 1e-15);
        assert!((g.values[(0, 2)] - p2).abs() < 1e-15);
        assert_eq!(g.values[(0, 1)], 0.0);
        assert_eq!(g.values[(0, 3)], 0.0);

        assert!(matches!(
            route(&Matrix::zeros(1, 4), &id4, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 0.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 2.0, 2.0], 1), vec![1]);
    }

    #[test]
    fn expert_forward_cases() {
        let mut rng = SeededRng::new(4);
        let e = ExpertWeights {
            w_gate: rng.gaussian_matrix(2, 2, 1.0),
            w_up: rng.gaussian_matrix(2, 2, 1.0),
            w_down: rng.gaussian_matrix(2, 2, 1.0),
        };
        assert_eq!(
            expert_forward(&Matrix::zeros(3, 2), &e).unwrap().max_abs(),
            0.0
        );
        let mut dead = e.clone();
        dead.w_down = Matrix::zeros(2, 2);
        let x = rng.gaussian_matrix(3, 2, 1.0);
        assert_eq!(expert_forward(&x, &dead).unwrap().max_abs(), 0.0);

        // Hand trace with small weights.
        let e = ExpertWeights {
            w_gate: Matrix::from_rows(&[[1.0, 0.0], [0.5, -1.0]]),
            w_up: Matrix::from_rows(&[[2.0, 1.0], [0.0, 1.0]]),
            w_down: Matrix::from_rows(&[[1.0, 1.0], [-1.0, 2.0]]),
        };
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        // gate pre-activations: [1, -1.5]; up: [4, 2]
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h0 = 1.0 * sig(1.0) * 4.0;
        let h1 = -1.5 * sig(-1.5) * 2.0;
        let expected = [h0 + h1, -h0 + 2.0 * h1];
        let out = expert_forward(&x, &e).unwrap();
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn random_layer(rng: &mut SeededRng, d: usize, n: usize, dff: usize) -> MoELayer {
        MoELayer {
            router: rng.gaussian_matrix(d, n, 1.0),
            experts: (0..n)
                .map(|_| ExpertWeights {
                    w_gate: rng.gaussian_matrix(dff, d, 0.5),
                    w_up: rng.gaussian_matrix(dff, d, 0.5),
                    w_down: rng.gaussian_matrix(d, dff, 0.5),
                })
                .collect(),
        }
    }

    fn dense_sum(x: &Matrix, layer: &MoELayer, gates: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for (e, ex) in layer.experts.iter().enumerate() {
            let out = expert_forward(x, ex).unwrap();
            for t in 0..x.rows() {
                for c in 0..x.cols() {
                    y[(t, c)] += gates[(t, e)] * out[(t, c)];
                }
            }
        }
        y
    }

    #[test]
    fn moe_layer_matches_dense_oracle() {
        let mut rng = SeededRng::new(8);
        for (n, k) in [(2, 2), (4, 2), (4, 1), (3, 3)] {
            let layer = random_layer(&mut rng, 6, n, 5);
            let x = rng.gaussian_matrix(7, 6, 1.0);
            let (y, g) = moe_layer_forward(&x, &layer, k).unwrap();
            assert!(gate_rows_valid(&g.values, k));
            let dense = dense_sum(&x, &layer, &g.values);
            assert!(y.max_abs_diff(&dense) < 1e-12);
        }
    }

    #[test]
    fn moe_layer_degenerate_cases() {
        let mut rng = SeededRng::new(9);
        let mut layer = random_layer(&mut rng, 4, 3, 6);
        let x = rng.gaussian_matrix(5, 4, 1.0);
        // k=1: single selected expert, unscaled.
        let out = moe_layer_forward_detailed(&x, &layer, 1).unwrap();
        for t in 0..5 {
            let e = out.gates.argmax()[t];
            let single = expert_forward(&x.gather_rows(&[t]), &layer.experts[e]).unwrap();
            assert!(out.y.gather_rows(&[t]).max_abs_diff(&single) < 1e-15);
        }
        // k == n with identical experts: convex combination of equal vectors.
        let first = layer.experts[0].clone();
        layer.experts.iter_mut().for_each(|e| *e = first.clone());
        let (y, _) = moe_layer_forward(&x, &layer, 3).unwrap();
        let single = expert_forward(&x, &first).unwrap();
        assert!(y.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn expert_permutation_leaves_output_unchanged() {
        let mut rng = SeededRng::new(10);
        let layer = random_layer(&mut rng, 5, 4, 6);
        let x = rng.gaussian_matrix(9, 5, 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = layer.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.experts[new] = layer.experts[old].clone();
            for r in 0..5 {
                permuted.router[(r, new)] = layer.router[(r, old)];
            }
        }
        let (a, _) = moe_layer_forward(&x, &layer, 2).unwrap();
        let (b, _) = moe_layer_forward(&x, &permuted, 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = MoEModel::new(tiny(2)).unwrap();
        for (name, p) in m.params_mut() {
            if !name.ends_with("embedding") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let trace = model_forward(&m, &[1, 2, 3, 4]).unwrap();
        let probs = crate::numerics::row_softmax(&trace.logits);
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 32.0).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic_and_validates_tokens() {
        let m = MoEModel::new(tiny(3)).unwrap();
        let a = model_forward(&m, &[5, 6, 7]).unwrap().logits;
        let b = model_forward(&MoEModel::new(tiny(3)).unwrap(), &[5, 6, 7])
            .unwrap()
            .logits;
        assert_eq!(a, b);
        assert!(matches!(model_forward(&m, &[40]), Err(Error::Input(_))));
        assert!(matches!(model_forward(&m, &[1; 17]), Err(Error::Input(_))));
    }

    #[test]
    fn ce_loss_cases() {
        let uniform = Matrix::zeros(3, 256);
        let l = ce_loss(&uniform, &[0, 100, 255]).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        assert!((l - 5.5452).abs() < 1e-4);
        let mut confident = Matrix::zeros(1, 4);
        confident[(0, 2)] = 50.0;
        assert!(ce_loss(&confident, &[2]).unwrap() < 1e-20);
        assert!(matches!(
            ce_loss(&uniform, &[0, 1, 256]),
            Err(Error::Input(_))
        ));
        // Values from mpmath at 40 digits for logits [[0.5,-1,2],[3,0,-2]]
        // with targets [2, 1].
        let logits = Matrix::from_rows(&[[0.5, -1.0, 2.0], [3.0, 0.0, -2.0]]);
        let l = ce_loss(&logits, &[2, 1]).unwrap();
        assert!((l - 1.648_148_266_017_152_2).abs() < 1e-14, "{l}");
    }

    #[test]
    fn upcycled_experts_start_identical() {
        let mut c = tiny(5);
        c.upcycle = true;
        let m = MoEModel::new(c).unwrap();
        for layer in &m.moe_layers {
            assert!(layer.experts.iter().all(|e| *e == layer.experts[0]));
        }
    }
}
