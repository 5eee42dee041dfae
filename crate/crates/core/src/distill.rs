//! Expert-wise knowledge distillation: fine-tune a pruned student under its
//! masks with `L = L_CE + λ · Σ_layers Σ_experts MSE(teacher expert, student expert)`.
//!
//! Expert pairs are compared on the tokens the *teacher* routes to that
//! expert, so the pairing stays fixed even if the student's router drifts.
//! The student expert sees the student's own hidden state for those tokens.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{random_sample, Sample};
use crate::error::{Error, Result};
use crate::model::{model_forward, MoEModel};
use crate::numerics::{Matrix, SeededRng};
use crate::persistence::verify_masks;
use crate::pruning::MaskSet;
use crate::train::{build_graph, cosine_lr, Adam, TeacherExpert, TeacherExperts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KDConfig {
    /// Fixed λ; `None` measures it on the first batch.
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub samples: usize,
    pub seed: u64,
    pub router_frozen: bool,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            lambda: None,
            epochs: 3,
            learning_rate: 2e-5,
            batch_size: 8,
            samples: 1000,
            seed: 0,
            router_frozen: true,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate and batch_size must be positive".into(),
            ));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Optimizer steps for the whole run.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.samples.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDLossBreakdown {
    pub l_ce: f64,
    pub l_expert: f64,
    pub lambda: f64,
    pub total: f64,
}

/// One line of the JSON-lines distillation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KDRecord {
    pub step: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_expert: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_pair(teacher: &MoEModel, student: &MoEModel) -> Result<()> {
    if !teacher.config.same_architecture(&student.config) {
        return Err(Error::Contract(
            "teacher and student must share layers, experts and dimensions".into(),
        ));
    }
    Ok(())
}

/// Teacher expert outputs for a batch, from tape-free forwards. Token indices
/// are offsets into the concatenated batch.
pub fn teacher_targets(teacher: &MoEModel, batch: &[Sample]) -> Result<TeacherExperts> {
    let cfg = &teacher.config;
    let mut tokens = vec![vec![Vec::new(); cfg.n_experts]; cfg.n_layers];
    let mut rows: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); cfg.n_experts]; cfg.n_layers];
    let mut offset = 0;
    for s in batch {
        let trace = model_forward(teacher, &s.input)?;
        for (l, layer) in trace.layers.iter().enumerate() {
            for (e, (idx, out)) in layer
                .moe
                .dispatch
                .iter()
                .zip(&layer.moe.expert_outputs)
                .enumerate()
            {
                tokens[l][e].extend(idx.iter().map(|t| t + offset));
                rows[l][e].extend_from_slice(out.data());
            }
        }
        offset += s.input.len();
    }
    let layers = tokens
        .into_iter()
        .zip(rows)
        .map(|(lt, lr)| {
            lt.into_iter()
                .zip(lr)
                .map(|(tokens, data)| {
                    let output = Matrix::from_vec(tokens.len(), cfg.d_model, data)?;
                    Ok(TeacherExpert { tokens, output })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherExperts { layers })
}

/// Loss values of the student on `batch` for a given λ.
pub fn kd_loss(
    teacher: &MoEModel,
    student: &MoEModel,
    masks: Option<&MaskSet>,
    batch: &[Sample],
    lambda: f64,
) -> Result<KDLossBreakdown> {
    check_pair(teacher, student)?;
    let targets = teacher_targets(teacher, batch)?;
    let mut tape = Tape::new();
    let out = build_graph(&mut tape, student, batch, masks, Some(&targets))?;
    let l_ce = tape.value(out.ce).item();
    let l_expert = tape
        .value(out.expert_loss.expect("teacher supplied"))
        .item();
    Ok(KDLossBreakdown {
        l_ce,
        l_expert,
        lambda,
        total: l_ce + lambda * l_expert,
    })
}

/// `λ = L_CE / L_expert` on `batch`. Falls back to 1 (second value `true`)
/// when the expert loss is zero, i.e. the student matches the teacher.
pub fn init_lambda(
    teacher: &MoEModel,
    student: &MoEModel,
    masks: Option<&MaskSet>,
    batch: &[Sample],
) -> Result<(f64, bool)> {
    let b = kd_loss(teacher, student, masks, batch, 0.0)?;
    if b.l_expert == 0.0 {
        log::warn!(
            "expert loss is zero on the first batch; student matches teacher, using lambda = 1"
        );
        return Ok((1.0, true));
    }
    Ok((b.l_ce / b.l_expert, false))
}

/// Fine-tunes `student` against `teacher` on `cfg.samples` random windows of
/// `corpus`, visited `cfg.epochs` times in seeded shuffled order.
///
/// Masked weights stay exactly zero: the forward masks them and they are
/// re-zeroed after every optimizer step.
pub fn distill(
    teacher: &MoEModel,
    student: &MoEModel,
    masks: &MaskSet,
    corpus: &[u8],
    cfg: &KDConfig,
) -> Result<(MoEModel, Vec<KDRecord>)> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    verify_masks(student, masks)?;
    let mut model = student.clone();
    let total_steps = cfg.total_steps();
    if total_steps == 0 {
        return Ok((model, Vec::new()));
    }
    let mut rng = SeededRng::new(cfg.seed).derive(0x6b64);
    let samples = (0..cfg.samples)
        .map(|_| random_sample(corpus, model.config.seq_len, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let router_frozen = cfg.router_frozen;
    let trainable = move |name: &str| !(router_frozen && name.ends_with(".router"));
    let mut adam = Adam::new(&model);
    let mut lambda = cfg.lambda;
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lam = match lambda {
                Some(l) => l,
                None => {
                    let (l, _) = init_lambda(teacher, &model, Some(masks), &batch)?;
                    log::info!("expert-loss weight initialized to {l}");
                    lambda = Some(l);
                    l
                }
            };
            let targets = teacher_targets(teacher, &batch)?;
            let mut tape = Tape::new();
            let out = build_graph(&mut tape, &model, &batch, Some(masks), Some(&targets))?;
            let expert = out.expert_loss.expect("teacher supplied");
            let weighted = tape.scale(expert, lam);
            let total = tape.add(out.ce, weighted)?;
            let (l_ce, l_expert, total_v) = (
                tape.value(out.ce).item(),
                tape.value(expert).item(),
                tape.value(total).item(),
            );
            if !total_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "distillation loss is {total_v} at step {step} (ce {l_ce}, expert {l_expert})"
                )));
            }
            tape.backward(total)?;
            let grads: Vec<Matrix> = out.leaves.iter().map(|(_, v)| tape.grad(*v)).collect();
            let lr = cosine_lr(cfg.learning_rate, step, total_steps, 0);
            adam.step(&mut model, &grads, lr, trainable);
            for (t, mask) in masks {
                mask.apply(model.expert_matrix_mut(*t))?;
            }
            log.push(KDRecord {
                step,
                lr,
                l_ce,
                l_expert,
                lambda: lam,
                total: total_v,
            });
            step += 1;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::model::{expert_forward, ExpertTarget, ModelConfig, Projection};
    use crate::pruning::{score_magnitude, select_mask, SparsityTarget};
    use crate::train::{build_graph_from, param_leaves};

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            n_experts: 2,
            top_k: 1,
            d_ff: 8,
            seq_len: 8,
            seed,
            upcycle: false,
        }
    }

    fn scaled(seed: u64) -> MoEModel {
        let mut m = MoEModel::new(tiny(seed)).unwrap();
        let mut rng = SeededRng::new(seed + 50);
        for (_, p) in m.params_mut() {
            *p = rng.gaussian_matrix(p.rows(), p.cols(), 0.5);
        }
        m
    }

    fn batch(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| {
                let w: Vec<usize> = (0..9).map(|_| rng.below(32)).collect();
                Sample {
                    input: w[..8].to_vec(),
                    target: w[1..].to_vec(),
                }
            })
            .collect()
    }

    fn prune_half(model: &MoEModel) -> (MoEModel, MaskSet) {
        let mut student = model.clone();
        let mut masks = MaskSet::new();
        for t in ExpertTarget::all(&model.config) {
            let m = select_mask(
                &score_magnitude(model.expert_matrix(t)),
                SparsityTarget::Unstructured { p: 0.5 },
            )
            .unwrap();
            m.apply(student.expert_matrix_mut(t)).unwrap();
            masks.insert(t, m);
        }
        (student, masks)
    }

    #[test]
    fn identical_student_has_zero_expert_loss() {
        let t = scaled(1);
        let b = batch(2, 3);
        let r = kd_loss(&t, &t, None, &b, 0.7).unwrap();
        assert_eq!(r.l_expert, 0.0);
        assert_eq!(r.total, r.l_ce);
        assert_eq!(init_lambda(&t, &t, None, &b).unwrap(), (1.0, true));
    }

    #[test]
    fn zero_lambda_gives_plain_ce() {
        let t = scaled(1);
        let (s, masks) = prune_half(&t);
        let r = kd_loss(&t, &s, Some(&masks), &batch(3, 2), 0.0).unwrap();
        assert!(r.l_expert > 0.0);
        assert_eq!(r.total, r.l_ce);
    }

    #[test]
    fn expert_loss_matches_double_forward() {
        let t = scaled(4);
        let (s, masks) = prune_half(&t);
        let b = batch(5, 3);
        let r = kd_loss(&t, &s, Some(&masks), &b, 1.0).unwrap();
        // Independent oracle: stack each expert's routed tokens over the batch,
        // run the student expert on its own hidden states for those tokens.
        let mut oracle = 0.0;
        for e in 0..2 {
            let (mut sq, mut n) = (0.0, 0usize);
            for sample in &b {
                let tt = model_forward(&t, &sample.input).unwrap();
                let st = model_forward(&s, &sample.input).unwrap();
                let idx = &tt.layers[0].moe.dispatch[e];
                if idx.is_empty() {
                    continue;
                }
                let x = st.layers[0].moe_input.gather_rows(idx);
                let out = expert_forward(&x, &s.moe_layers[0].experts[e]).unwrap();
                let diff = out.sub(&tt.layers[0].moe.expert_outputs[e]).unwrap();
                sq += diff.data().iter().map(|v| v * v).sum::<f64>();
                n += diff.len();
            }
            if n > 0 {
                oracle += sq / n as f64;
            }
        }
        assert!(
            (r.l_expert - oracle).abs() < 1e-12,
            "{} vs {oracle}",
            r.l_expert
        );
    }

    #[test]
    fn lambda_is_ratio_of_separate_losses() {
        let t = scaled(6);
        let (s, masks) = prune_half(&t);
        let b = batch(7, 2);
        let (lam, fallback) = init_lambda(&t, &s, Some(&masks), &b).unwrap();
        assert!(!fallback);
        let r = kd_loss(&t, &s, Some(&masks), &b, 0.0).unwrap();
        assert!((lam - r.l_ce / r.l_expert).abs() < 1e-12);
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let t = scaled(8);
        let (s, masks) = prune_half(&t);
        let b = batch(9, 2);
        let targets = teacher_targets(&t, &b).unwrap();
        for name in [
            "layers.0.experts.1.w_down",
            "layers.0.attn.wq",
            "token_embedding",
        ] {
            let x = s.param(name).unwrap().clone();
            let err = grad_check(
                |tape, v| {
                    let mut leaves = param_leaves(tape, &s);
                    leaves.iter_mut().find(|(n, _)| n == name).unwrap().1 = v;
                    let out = build_graph_from(
                        tape,
                        &s.config,
                        leaves,
                        &b,
                        Some(&masks),
                        Some(&targets),
                    )?;
                    let w = tape.scale(out.expert_loss.unwrap(), 0.8);
                    tape.add(out.ce, w)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }

    #[test]
    fn distill_keeps_masks_and_teacher() {
        let t = MoEModel::new(ModelConfig {
            vocab_size: 256,
            ..tiny(10)
        })
        .unwrap();
        let (s, masks) = prune_half(&t);
        let teacher_before = t.clone();
        let corpus = crate::corpus::synthetic_text(1, 5000);
        let cfg = KDConfig {
            samples: 40,
            batch_size: 4,
            epochs: 5,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (out, log) = distill(&t, &s, &masks, &corpus, &cfg).unwrap();
        assert_eq!(log.len(), 50);
        for (target, mask) in &masks {
            let w = out.expert_matrix(*target);
            for (v, &k) in w.data().iter().zip(mask.keep()) {
                if !k {
                    assert_eq!(v.to_bits(), 0);
                }
            }
        }
        for ((_, a), (_, b)) in t.params().iter().zip(teacher_before.params()) {
            assert_eq!(a.data(), b.data());
        }
        // Router frozen by default.
        assert_eq!(out.moe_layers[0].router, s.moe_layers[0].router);
        assert_ne!(
            out.expert_matrix(ExpertTarget::new(0, 0, Projection::Up)),
            s.expert_matrix(ExpertTarget::new(0, 0, Projection::Up))
        );
        for r in &log {
            assert!((r.total - (r.l_ce + r.lambda * r.l_expert)).abs() < 1e-12);
            assert_eq!(r.lambda, log[0].lambda);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let t = MoEModel::new(tiny(11)).unwrap();
        let (s, masks) = prune_half(&t);
        let cfg = KDConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, log) = distill(&t, &s, &masks, b"unused", &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(out.params(), s.params());
    }

    #[test]
    fn architecture_mismatch_is_a_contract_error() {
        let t = MoEModel::new(tiny(1)).unwrap();
        let s = MoEModel::new(ModelConfig {
            n_experts: 3,
            ..tiny(1)
        })
        .unwrap();
        assert!(matches!(
            kd_loss(&t, &s, None, &batch(1, 1), 1.0),
            Err(Error::Contract(_))
        ));
    }
}
