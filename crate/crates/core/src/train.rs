//! Differentiable forward on a tape, Adam, cosine schedule, plain
//! cross-entropy training and perplexity evaluation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, MASKED_LOGIT};
use crate::corpus::{eval_windows, random_sample, Sample};
use crate::error::{Error, Result};
use crate::model::{
    check_tokens, model_logits, top_k_keep, ExpertTarget, MoEModel, ModelConfig, Projection,
};
use crate::numerics::{Matrix, SeededRng};
use crate::pruning::MaskSet;

/// Teacher expert outputs on the tokens the teacher routed to each expert,
/// indexed `[layer][expert]`. Token indices address the flattened batch.
#[derive(Clone, Debug)]
pub struct TeacherExperts {
    pub layers: Vec<Vec<TeacherExpert>>,
}

#[derive(Clone, Debug)]
pub struct TeacherExpert {
    pub tokens: Vec<usize>,
    pub output: Matrix,
}

pub struct GraphOutput {
    pub logits: Var,
    /// Mean cross-entropy over all target tokens of the batch.
    pub ce: Var,
    /// Σ over layers and experts of the expert-output MSE against the
    /// teacher, present when teacher targets were supplied.
    pub expert_loss: Option<Var>,
    /// Parameter leaves in canonical order.
    pub leaves: Vec<(String, Var)>,
}

/// One leaf per model parameter, in canonical order.
pub fn param_leaves(tape: &mut Tape, model: &MoEModel) -> Vec<(String, Var)> {
    model
        .params()
        .into_iter()
        .map(|(name, value)| (name, tape.leaf(value.clone())))
        .collect()
}

/// Records the full model forward for a batch on `tape`. Masked expert
/// matrices pass through `masked_assign`, so pruned entries are zero in the
/// forward and receive no gradient.
pub fn build_graph(
    tape: &mut Tape,
    model: &MoEModel,
    batch: &[Sample],
    masks: Option<&MaskSet>,
    teacher: Option<&TeacherExperts>,
) -> Result<GraphOutput> {
    let leaves = param_leaves(tape, model);
    build_graph_from(tape, &model.config, leaves, batch, masks, teacher)
}

/// As [`build_graph`], with caller-provided parameter leaves.
pub fn build_graph_from(
    tape: &mut Tape,
    cfg: &ModelConfig,
    leaves: Vec<(String, Var)>,
    batch: &[Sample],
    masks: Option<&MaskSet>,
    teacher: Option<&TeacherExperts>,
) -> Result<GraphOutput> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut eff: HashMap<String, Var> = HashMap::new();
    for (name, leaf) in &leaves {
        let mut v = *leaf;
        if let Some(masks) = masks {
            if let Ok(t) = name.parse::<ExpertTarget>() {
                if let Some(mask) = masks.get(&t) {
                    v = tape.masked_assign(*leaf, mask.keep(), 0.0)?;
                }
            }
        }
        eff.insert(name.clone(), v);
    }
    let p = |name: &str| eff[name];

    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for s in batch {
        check_tokens(cfg, &s.input)?;
        if s.target.len() != s.input.len() {
            return Err(Error::shape("sample input/target lengths differ"));
        }
        tokens.extend_from_slice(&s.input);
        positions.extend(0..s.input.len());
        targets.extend_from_slice(&s.target);
        segments.push(s.input.len());
    }
    let n_tokens = tokens.len();

    let tok = tape.gather(p("token_embedding"), &tokens)?;
    let pos = tape.gather(p("position_embedding"), &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut expert_terms: Vec<Var> = Vec::new();

    for l in 0..cfg.n_layers {
        let a = tape.rms_norm(x);
        let q = tape.matmul(a, p(&format!("layers.{l}.attn.wq")))?;
        let k = tape.matmul(a, p(&format!("layers.{l}.attn.wk")))?;
        let v = tape.matmul(a, p(&format!("layers.{l}.attn.wv")))?;
        let ctx = tape.causal_attention(q, k, v, cfg.n_heads, &segments)?;
        let o = tape.matmul(ctx, p(&format!("layers.{l}.attn.wo")))?;
        x = tape.add(x, o)?;

        let m = tape.rms_norm(x);
        let logits = tape.matmul(m, p(&format!("layers.{l}.router")))?;
        let keep = top_k_keep(tape.value(logits), cfg.top_k);
        let masked = tape.masked_assign(logits, &keep, MASKED_LOGIT)?;
        let gates = tape.row_softmax(masked);

        let mut dispatch = vec![Vec::new(); cfg.n_experts];
        for t in 0..n_tokens {
            for (e, slot) in dispatch.iter_mut().enumerate() {
                if keep[t * cfg.n_experts + e] {
                    slot.push(t);
                }
            }
        }

        let mut y: Option<Var> = None;
        for (e, idx) in dispatch.iter().enumerate() {
            let w = expert_vars(&p, l, e);
            let own = if idx.is_empty() {
                None
            } else {
                let out = expert_on_tape(tape, m, idx, w)?;
                let ge = tape.gather(gates, idx)?;
                let scaled = tape.scale_rows(out, ge, e)?;
                let contrib = tape.scatter_rows(scaled, idx, n_tokens)?;
                y = Some(match y {
                    Some(acc) => tape.add(acc, contrib)?,
                    None => contrib,
                });
                Some(out)
            };
            if let Some(teacher) = teacher {
                let te = &teacher.layers[l][e];
                if te.tokens.is_empty() {
                    continue;
                }
                let student_out = match own {
                    Some(out) if *idx == te.tokens => out,
                    _ => expert_on_tape(tape, m, &te.tokens, w)?,
                };
                let target = tape.leaf(te.output.clone());
                expert_terms.push(tape.mse(student_out, target)?);
            }
        }
        let y = y.expect("every token is routed to top_k >= 1 experts");
        x = tape.add(x, y)?;
    }

    let h = tape.rms_norm(x);
    let logits = tape.matmul(h, p("lm_head"))?;
    let ce = tape.cross_entropy(logits, &targets)?;
    let expert_loss = match teacher {
        None => None,
        Some(_) => {
            let mut acc = tape.leaf(Matrix::scalar(0.0));
            for term in expert_terms {
                acc = tape.add(acc, term)?;
            }
            Some(acc)
        }
    };
    Ok(GraphOutput {
        logits,
        ce,
        expert_loss,
        leaves,
    })
}

fn expert_vars(p: &impl Fn(&str) -> Var, layer: usize, expert: usize) -> [Var; 3] {
    Projection::ALL.map(|proj| p(&ExpertTarget::new(layer, expert, proj).to_string()))
}

/// SwiGLU expert applied to the rows `idx` of `x`.
fn expert_on_tape(tape: &mut Tape, x: Var, idx: &[usize], w: [Var; 3]) -> Result<Var> {
    let [w_gate, w_up, w_down] = w;
    let xe = tape.gather(x, idx)?;
    let g = tape.matmul_nt(xe, w_gate)?;
    let g = tape.silu(g);
    let u = tape.matmul_nt(xe, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul_nt(h, w_down)
}

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &MoEModel) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let params = model.params();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Applies one update. `grads` must follow the canonical parameter order.
    pub fn step(
        &mut self,
        model: &mut MoEModel,
        grads: &[Matrix],
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, (name, param)) in model.params_mut().into_iter().enumerate() {
            if !trainable(&name) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`, after an optional
/// linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Plain cross-entropy training on random windows of `corpus`.
pub fn train(model: &mut MoEModel, corpus: &[u8], cfg: &TrainConfig) -> Result<Vec<TrainRecord>> {
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let seq_len = model.config.seq_len;
    let mut rng = SeededRng::new(cfg.seed).derive(0x7261_696e);
    let mut adam = Adam::new(model);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| random_sample(corpus, seq_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let out = build_graph(&mut tape, model, &batch, None, None)?;
        let loss = tape.value(out.ce).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at step {step}")));
        }
        tape.backward(out.ce)?;
        let grads: Vec<Matrix> = out.leaves.iter().map(|(_, v)| tape.grad(*v)).collect();
        let lr = cosine_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_steps);
        adam.step(model, &grads, lr, |_| true);
        log.push(TrainRecord { step, lr, loss });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_ce: f64,
    pub token_count: usize,
}

/// Perplexity over consecutive `seq_len` windows of `text`.
pub fn evaluate(model: &MoEModel, text: &[u8]) -> Result<EvalReport> {
    let windows = eval_windows(text, model.config.seq_len);
    evaluate_samples(model, &windows)
}

pub fn evaluate_samples(model: &MoEModel, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input(
            "evaluation text is shorter than one window".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0;
    for s in samples {
        let logits = model_logits(model, &s.input)?;
        total += crate::model::ce_loss(&logits, &s.target)? * s.target.len() as f64;
        count += s.target.len();
    }
    let mean_ce = total / count as f64;
    Ok(EvalReport {
        perplexity: mean_ce.exp(),
        mean_ce,
        token_count: count,
    })
}
