//! One-shot pruning of expert weight matrices: saliency metrics, per-row
//! mask selection (unstructured or N:M), the Hessian-based weight update and
//! the layer-by-layer driver.
//!
//! Every comparison group is one output row of a stored `out x in` matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    collect, CalibrationSet, CalibrationStats, CollectOptions, ScaledNormAccumulator,
};
use crate::error::{Error, Result};
use crate::model::{ExpertTarget, MoEModel};
use crate::numerics::{cholesky_upper, matmul_nt, spd_inverse, Matrix};

/// Added to `p * cols` before flooring so that e.g. `0.7 * 10` counts as 7.
const FLOOR_SLACK: f64 = 1e-9;

pub const DEFAULT_DAMP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SparsityTarget {
    /// Prune `floor(p * cols)` weights of every row. `p == 0` is a no-op.
    Unstructured { p: f64 },
    /// Keep `n_keep` of every aligned group of `m_group` columns.
    SemiStructured { n_keep: usize, m_group: usize },
}

impl SparsityTarget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityTarget::Unstructured { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::Config(format!("sparsity {p} outside [0, 1)")))
            }
            SparsityTarget::SemiStructured { n_keep, m_group }
                if n_keep == 0 || n_keep >= m_group =>
            {
                Err(Error::Config(format!(
                    "pattern {n_keep}:{m_group} needs 0 < n < m"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Nominal fraction of weights removed.
    pub fn fraction(&self) -> f64 {
        match *self {
            SparsityTarget::Unstructured { p } => p,
            SparsityTarget::SemiStructured { n_keep, m_group } => {
                1.0 - n_keep as f64 / m_group as f64
            }
        }
    }

    /// Weights pruned from one row of `cols` columns.
    pub fn pruned_per_row(&self, cols: usize) -> usize {
        match *self {
            SparsityTarget::Unstructured { p } => (p * cols as f64 + FLOOR_SLACK).floor() as usize,
            SparsityTarget::SemiStructured { n_keep, m_group } => {
                cols / m_group * (m_group - n_keep)
            }
        }
    }
}

impl fmt::Display for SparsityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityTarget::Unstructured { p } => write!(f, "{p}"),
            SparsityTarget::SemiStructured { n_keep, m_group } => write!(f, "{n_keep}:{m_group}"),
        }
    }
}

/// Parses `"0.5"` or `"2:4"`.
impl FromStr for SparsityTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse sparsity target {s:?}"));
        let t = match s.split_once(':') {
            Some((n, m)) => SparsityTarget::SemiStructured {
                n_keep: n.trim().parse().map_err(|_| bad())?,
                m_group: m.trim().parse().map_err(|_| bad())?,
            },
            None => SparsityTarget::Unstructured {
                p: s.trim().parse().map_err(|_| bad())?,
            },
        };
        t.validate()?;
        Ok(t)
    }
}

/// Keep-bitmap for one weight matrix, row-major; `true` keeps the weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

pub type MaskSet = BTreeMap<ExpertTarget, SparsityMask>;

impl SparsityMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} mask bits for a {rows}x{cols} matrix",
                keep.len()
            )));
        }
        Ok(SparsityMask { rows, cols, keep })
    }

    pub fn dense(rows: usize, cols: usize) -> Self {
        SparsityMask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Zeroes masked entries in place; kept entries are untouched.
    pub fn apply(&self, w: &mut Matrix) -> Result<()> {
        if w.shape() != (self.rows, self.cols) {
            return Err(Error::shape(format!(
                "{}x{} mask on {}x{} weight",
                self.rows,
                self.cols,
                w.rows(),
                w.cols()
            )));
        }
        for (v, &k) in w.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Magnitude,
    Wanda,
    MoePruner,
    SparseGpt,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Magnitude,
        Method::Wanda,
        Method::MoePruner,
        Method::SparseGpt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::MoePruner => "moe-pruner",
            Method::SparseGpt => "sparsegpt",
        }
    }

    fn needs_hessian(self) -> bool {
        self == Method::SparseGpt
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pruning method {s:?}")))
    }
}

pub fn score_magnitude(w: &Matrix) -> Matrix {
    w.map(f64::abs)
}

fn scale_columns(w: &Matrix, norms: &[f64]) -> Result<Matrix> {
    if norms.len() != w.cols() {
        return Err(Error::shape(format!(
            "{} feature norms for a matrix with {} columns",
            norms.len(),
            w.cols()
        )));
    }
    let mut s = score_magnitude(w);
    for r in 0..s.rows() {
        for (v, n) in s.row_mut(r).iter_mut().zip(norms) {
            *v *= n;
        }
    }
    Ok(s)
}

/// `|W_ij| · ‖X_j‖` with unscaled input norms.
pub fn score_wanda(w: &Matrix, norms: &[f64]) -> Result<Matrix> {
    scale_columns(w, norms)
}

/// `|W_ij| · ‖X_j · Gate_j‖`: input norms over routed tokens, each token
/// weighted by its router gate.
pub fn score_moe_pruner(
    w: &Matrix,
    target: ExpertTarget,
    acc: &ScaledNormAccumulator,
) -> Result<Matrix> {
    if acc.target != target {
        return Err(Error::Contract(format!(
            "statistics for {} used to score {target}",
            acc.target
        )));
    }
    scale_columns(w, &acc.scaled_norms())
}

/// Dampened Hessian `H + damp · mean(diag H) · I`. Features that never
/// fired (zero diagonal) get a unit diagonal so the inverse exists.
pub fn dampen(h: &Matrix, damp: f64) -> Result<Matrix> {
    if h.rows() != h.cols() {
        return Err(Error::shape(format!(
            "Hessian is {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    if damp < 0.0 || !damp.is_finite() {
        return Err(Error::Config(format!(
            "dampening {damp} must be nonnegative"
        )));
    }
    let d = h.rows();
    let mut out = h.clone();
    let mean = (0..d).map(|i| h[(i, i)]).sum::<f64>() / d.max(1) as f64;
    for i in 0..d {
        let v = &mut out.data_mut()[i * d + i];
        if *v == 0.0 {
            *v = 1.0;
        }
        *v += damp * mean;
    }
    Ok(out)
}

/// `W_ij² / [H'⁻¹]_jj`; also returns `H'⁻¹` for the weight update.
pub fn score_sparsegpt(w: &Matrix, h: &Matrix, damp: f64) -> Result<(Matrix, Matrix)> {
    if h.rows() != w.cols() {
        return Err(Error::shape(format!(
            "{}x{} Hessian for a matrix with {} columns",
            h.rows(),
            h.cols(),
            w.cols()
        )));
    }
    let h_inv = spd_inverse(&dampen(h, damp)?)?;
    let mut s = w.map(|v| v * v);
    for r in 0..s.rows() {
        for (c, v) in s.row_mut(r).iter_mut().enumerate() {
            *v /= h_inv[(c, c)];
        }
    }
    Ok((s, h_inv))
}

/// Column order in which one comparison group gets pruned: ascending score,
/// lower column first on ties.
fn prune_order(scores: &[f64], cols: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = cols.collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

pub fn select_mask(scores: &Matrix, target: SparsityTarget) -> Result<SparsityMask> {
    target.validate()?;
    let (rows, cols) = scores.shape();
    if !scores.is_finite() {
        return Err(Error::Numerical(
            "pruning scores contain NaN or infinity".into(),
        ));
    }
    let mut keep = vec![true; rows * cols];
    match target {
        SparsityTarget::Unstructured { .. } => {
            let k = target.pruned_per_row(cols);
            for r in 0..rows {
                for c in prune_order(scores.row(r), 0..cols).into_iter().take(k) {
                    keep[r * cols + c] = false;
                }
            }
        }
        SparsityTarget::SemiStructured { n_keep, m_group } => {
            if cols % m_group != 0 {
                return Err(Error::Config(format!(
                    "{cols} columns not divisible into groups of {m_group}"
                )));
            }
            for r in 0..rows {
                for g in (0..cols).step_by(m_group) {
                    let order = prune_order(scores.row(r), g..g + m_group);
                    for c in order.into_iter().take(m_group - n_keep) {
                        keep[r * cols + c] = false;
                    }
                }
            }
        }
    }
    SparsityMask::new(rows, cols, keep)
}

/// Zeroes the masked weights while compensating the surviving ones.
///
/// Columns are swept left to right. With `U` the upper Cholesky factor of
/// `h_inv`, removing `w_j` adds `-(w_j / U_jj) · U_j,(j+1)..` to the later
/// columns of the row; this is the optimal-brain-surgeon correction under
/// the Hessian restricted to the not-yet-visited columns.
pub fn obs_update(w: &Matrix, mask: &SparsityMask, h_inv: &Matrix) -> Result<Matrix> {
    let (rows, cols) = w.shape();
    if mask.rows() != rows || mask.cols() != cols || h_inv.shape() != (cols, cols) {
        return Err(Error::shape(format!(
            "weight {rows}x{cols}, mask {}x{}, inverse Hessian {}x{}",
            mask.rows(),
            mask.cols(),
            h_inv.rows(),
            h_inv.cols()
        )));
    }
    if let Some(j) = (0..cols).find(|&j| h_inv[(j, j)] <= 0.0) {
        return Err(Error::Numerical(format!(
            "inverse Hessian diagonal {j} is {}",
            h_inv[(j, j)]
        )));
    }
    let u = cholesky_upper(h_inv)?;
    let mut out = w.clone();
    for r in 0..rows {
        let row = out.row_mut(r);
        for j in 0..cols {
            if mask.is_kept(r, j) {
                continue;
            }
            let e = row[j] / u[(j, j)];
            let urow = u.row(j);
            for c in j + 1..cols {
                row[c] -= e * urow[c];
            }
            row[j] = 0.0;
        }
    }
    Ok(out)
}

/// `‖(W − W′) Xᵀ‖_F` for inputs `x` of shape `tokens x in`.
pub fn reconstruction_error(w: &Matrix, w_pruned: &Matrix, x: &Matrix) -> Result<f64> {
    if w.shape() != w_pruned.shape() {
        return Err(Error::shape(format!(
            "{:?} vs {:?} weights",
            w.shape(),
            w_pruned.shape()
        )));
    }
    Ok(matmul_nt(&w.sub(w_pruned)?, x)?.frobenius_norm())
}

/// Same quantity from the Gram matrix `H = XᵀX`: `sqrt(Σ_i δ_i H δ_iᵀ)`.
pub fn hessian_reconstruction_error(w: &Matrix, w_pruned: &Matrix, h: &Matrix) -> Result<f64> {
    let delta = w.sub(w_pruned)?;
    if h.shape() != (delta.cols(), delta.cols()) {
        return Err(Error::shape(format!(
            "{}x{} Hessian for {} columns",
            h.rows(),
            h.cols(),
            delta.cols()
        )));
    }
    let dh = crate::numerics::matmul(&delta, h)?;
    let total: f64 = dh.data().iter().zip(delta.data()).map(|(a, b)| a * b).sum();
    // Rounding can leave a tiny negative for near-zero deltas.
    Ok(total.max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagate {
    /// Every layer is scored from activations of the dense model.
    #[default]
    Dense,
    /// Each layer's statistics are recollected through the already pruned
    /// earlier layers.
    Recompute,
}

impl FromStr for Propagate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Propagate::Dense),
            "recompute" => Ok(Propagate::Recompute),
            _ => Err(Error::Config(format!("unknown propagation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    pub target: SparsityTarget,
    pub propagate: Propagate,
    pub damp: f64,
    /// Apply the Hessian weight update (SparseGPT only).
    pub weight_update: bool,
    pub gate_scaled_hessian: bool,
}

impl PruneConfig {
    pub fn new(method: Method, target: SparsityTarget) -> Self {
        PruneConfig {
            method,
            target,
            propagate: Propagate::Dense,
            damp: DEFAULT_DAMP,
            weight_update: true,
            gate_scaled_hessian: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub method: Method,
    pub pruned: usize,
    pub total: usize,
    pub sparsity: f64,
    /// Reconstruction error of plain masking, measured with the calibration
    /// Hessian; absent when no Hessian was collected.
    pub error_masked: Option<f64>,
    /// Reconstruction error after the weight update, when one was applied.
    pub error_updated: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Method,
    pub target: String,
    pub propagate: Propagate,
    pub targets: Vec<TargetReport>,
    pub pruned: usize,
    pub total: usize,
    pub sparsity: f64,
}

fn require<'a, T>(
    map: &'a BTreeMap<ExpertTarget, T>,
    t: ExpertTarget,
    what: &str,
) -> Result<&'a T> {
    map.get(&t)
        .ok_or_else(|| Error::Contract(format!("calibration stats lack {what} for {t}")))
}

/// Prunes one expert matrix. Returns the new weights and mask.
fn prune_matrix(
    w: &Matrix,
    t: ExpertTarget,
    stats: &CalibrationStats,
    cfg: &PruneConfig,
) -> Result<(Matrix, SparsityMask, Option<f64>, Option<f64>)> {
    let mut h_inv = None;
    let scores = match cfg.method {
        Method::Magnitude => score_magnitude(w),
        Method::Wanda => score_wanda(w, &require(&stats.norms, t, "input norms")?.norms())?,
        Method::MoePruner => score_moe_pruner(w, t, require(&stats.norms, t, "input norms")?)?,
        Method::SparseGpt => {
            let h = &require(&stats.hessians, t, "a Hessian")?.h;
            let (s, inv) = score_sparsegpt(w, h, cfg.damp)?;
            h_inv = Some(inv);
            s
        }
    };
    let mask = select_mask(&scores, cfg.target)?;
    let mut masked = w.clone();
    mask.apply(&mut masked)?;
    let hessian = stats.hessians.get(&t).map(|a| &a.h);
    let error_masked = hessian
        .map(|h| hessian_reconstruction_error(w, &masked, h))
        .transpose()?;
    match h_inv {
        Some(inv) if cfg.weight_update && mask.pruned_count() > 0 => {
            let updated = obs_update(w, &mask, &inv)?;
            let error_updated = hessian
                .map(|h| hessian_reconstruction_error(w, &updated, h))
                .transpose()?;
            Ok((updated, mask, error_masked, error_updated))
        }
        _ => Ok((masked, mask, error_masked, None)),
    }
}

/// Prunes every expert matrix of every layer, layer by layer. Attention and
/// router weights are never touched.
///
/// With [`Propagate::Recompute`] the statistics for layers after the first
/// are recollected from `cal` through the partially pruned model.
pub fn prune_model(
    model: &MoEModel,
    stats: &CalibrationStats,
    cfg: &PruneConfig,
    cal: Option<&CalibrationSet>,
) -> Result<(MoEModel, MaskSet, PruneReport)> {
    cfg.target.validate()?;
    stats
        .check_compatible(&model.config)
        .map_err(|e| Error::Contract(e.to_string()))?;
    if cfg.propagate == Propagate::Recompute && cal.is_none() {
        return Err(Error::Config(
            "recompute propagation needs the calibration set".into(),
        ));
    }
    let mcfg = model.config.clone();
    let mut pruned = model.clone();
    let mut masks = MaskSet::new();
    let mut reports = Vec::new();
    for l in 0..mcfg.n_layers {
        let fresh;
        let layer_stats = match (cfg.propagate, cal) {
            (Propagate::Recompute, Some(cal)) if l > 0 => {
                let opts = CollectOptions {
                    gate_scaled_hessian: cfg.gate_scaled_hessian,
                    count_mode: stats.frequencies.mode,
                    unit_gates: false,
                    skip_hessians: !cfg.method.needs_hessian() && stats.hessians.is_empty(),
                    layers: Some(vec![l]),
                };
                fresh = collect(&pruned, cal, &opts)?;
                &fresh
            }
            _ => stats,
        };
        for t in ExpertTarget::in_layer(&mcfg, l) {
            let (w, mask, error_masked, error_updated) =
                prune_matrix(model.expert_matrix(t), t, layer_stats, cfg)?;
            let total = mask.rows() * mask.cols();
            reports.push(TargetReport {
                target: t.to_string(),
                method: cfg.method,
                pruned: mask.pruned_count(),
                total,
                sparsity: mask.pruned_count() as f64 / total as f64,
                error_masked,
                error_updated,
            });
            *pruned.expert_matrix_mut(t) = w;
            masks.insert(t, mask);
        }
    }
    let pruned_total: usize = reports.iter().map(|r| r.pruned).sum();
    let total: usize = reports.iter().map(|r| r.total).sum();
    let report = PruneReport {
        method: cfg.method,
        target: cfg.target.to_string(),
        propagate: cfg.propagate,
        targets: reports,
        pruned: pruned_total,
        total,
        sparsity: pruned_total as f64 / total.max(1) as f64,
    };
    Ok((pruned, masks, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Projection;
    use crate::numerics::SeededRng;

    fn mask_rows(m: &SparsityMask) -> Vec<Vec<u8>> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|&k| k as u8).collect())
            .collect()
    }

    #[test]
    fn magnitude_examples() {
        let w = Matrix::from_rows(&[vec![-3.0, 1.0]]);
        assert_eq!(score_magnitude(&w).data(), &[3.0, 1.0]);
        assert_eq!(score_magnitude(&w.scale(-1.0)), score_magnitude(&w));
        assert_eq!(score_magnitude(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
    }

    #[test]
    fn wanda_examples() {
        let w = Matrix::from_rows(&[vec![2.0, -1.0]]);
        assert_eq!(score_wanda(&w, &[1.0, 4.0]).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(score_wanda(&w, &[1.0, 1.0]).unwrap(), score_magnitude(&w));
        assert_eq!(score_wanda(&w, &[0.0, 1.0]).unwrap().data(), &[0.0, 1.0]);
        assert!(matches!(score_wanda(&w, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn moe_pruner_rejects_foreign_stats() {
        let acc = ScaledNormAccumulator::new(ExpertTarget::new(0, 1, Projection::Up), 2);
        let w = Matrix::zeros(1, 2);
        let err = score_moe_pruner(&w, ExpertTarget::new(0, 0, Projection::Up), &acc);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn dead_expert_falls_back_to_index_order() {
        let t = ExpertTarget::new(0, 0, Projection::Gate);
        let acc = ScaledNormAccumulator::new(t, 4);
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let s = score_moe_pruner(&w, t, &acc).unwrap();
        let m = select_mask(&s, SparsityTarget::Unstructured { p: 0.5 }).unwrap();
        assert_eq!(mask_rows(&m), vec![vec![0, 0, 1, 1]]);
    }

    #[test]
    fn sparsegpt_examples() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]);
        let (s, _) = score_sparsegpt(&w, &Matrix::diag(&[4.0, 1.0]), 0.0).unwrap();
        assert_eq!(s.data(), &[4.0, 4.0, 36.0, 0.25]);
        // Identity Hessian without dampening.
        let (s, _) = score_sparsegpt(&w, &Matrix::identity(2), 0.0).unwrap();
        assert_eq!(s, w.map(|v| v * v));
        let singular = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(score_sparsegpt(&w, &singular, 0.01).is_ok());
        assert!(matches!(
            score_sparsegpt(&w, &singular, 0.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn select_mask_examples() {
        let half = SparsityTarget::Unstructured { p: 0.5 };
        let m = select_mask(&Matrix::from_rows(&[vec![4.0, 3.0, 2.0, 1.0]]), half).unwrap();
        assert_eq!(mask_rows(&m), vec![vec![1, 1, 0, 0]]);
        let nm = SparsityTarget::SemiStructured {
            n_keep: 2,
            m_group: 4,
        };
        let m = select_mask(&Matrix::from_rows(&[vec![5.0, 1.0, 4.0, 2.0]]), nm).unwrap();
        assert_eq!(mask_rows(&m), vec![vec![1, 0, 1, 0]]);
        let m = select_mask(&Matrix::filled(1, 4, 7.0), half).unwrap();
        assert_eq!(mask_rows(&m), vec![vec![0, 0, 1, 1]]);
        assert!(matches!(
            select_mask(
                &Matrix::zeros(1, 4),
                SparsityTarget::Unstructured { p: 1.0 }
            ),
            Err(Error::Config(_))
        ));
        assert!(select_mask(&Matrix::zeros(1, 6), nm).is_err());
    }

    #[test]
    fn row_counts_are_exact() {
        let mut rng = SeededRng::new(9);
        let s = rng.uniform_matrix(7, 10, 0.0, 1.0);
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let m = select_mask(&s, SparsityTarget::Unstructured { p }).unwrap();
            let k = (p * 10.0 + 1e-9).floor() as usize;
            for r in 0..7 {
                assert_eq!(m.row(r).iter().filter(|&&b| !b).count(), k);
            }
        }
    }

    #[test]
    fn parse_targets() {
        assert_eq!(
            "2:4".parse::<SparsityTarget>().unwrap(),
            SparsityTarget::SemiStructured {
                n_keep: 2,
                m_group: 4
            }
        );
        assert_eq!(
            "0.5".parse::<SparsityTarget>().unwrap(),
            SparsityTarget::Unstructured { p: 0.5 }
        );
        assert!("4:4".parse::<SparsityTarget>().is_err());
        assert!("x".parse::<SparsityTarget>().is_err());
    }

    #[test]
    fn obs_with_identity_is_plain_zeroing() {
        let mut rng = SeededRng::new(2);
        let w = rng.gaussian_matrix(3, 5, 1.0);
        let m = select_mask(
            &score_magnitude(&w),
            SparsityTarget::Unstructured { p: 0.4 },
        )
        .unwrap();
        let mut zeroed = w.clone();
        m.apply(&mut zeroed).unwrap();
        assert_eq!(obs_update(&w, &m, &Matrix::identity(5)).unwrap(), zeroed);
        assert_eq!(
            obs_update(&w, &SparsityMask::dense(3, 5), &Matrix::identity(5)).unwrap(),
            w
        );
    }

    #[test]
    fn obs_single_pruned_column_is_optimal() {
        // With one pruned weight the update is the closed-form least-squares
        // optimum, so no perturbation of the survivors can do better.
        let mut rng = SeededRng::new(11);
        let x = rng.gaussian_matrix(20, 4, 1.0);
        let h = crate::numerics::matmul_tn(&x, &x).unwrap();
        let w = rng.gaussian_matrix(1, 4, 1.0);
        let mask = SparsityMask::new(1, 4, vec![false, true, true, true]).unwrap();
        let inv = spd_inverse(&h).unwrap();
        let upd = obs_update(&w, &mask, &inv).unwrap();
        let base = reconstruction_error(&w, &upd, &x).unwrap();
        for _ in 0..50 {
            let mut p = upd.clone();
            for c in 1..4 {
                p.data_mut()[c] += 1e-3 * rng.normal();
            }
            assert!(reconstruction_error(&w, &p, &x).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn reconstruction_error_forms_agree() {
        let mut rng = SeededRng::new(4);
        let w = rng.gaussian_matrix(3, 4, 1.0);
        let x = rng.gaussian_matrix(6, 4, 1.0);
        let mut p = w.clone();
        p.data_mut()[1] = 0.0;
        p.data_mut()[6] = 0.0;
        let h = crate::numerics::matmul_tn(&x, &x).unwrap();
        let direct = reconstruction_error(&w, &p, &x).unwrap();
        let via_h = hessian_reconstruction_error(&w, &p, &h).unwrap();
        assert!((direct - via_h).abs() < 1e-10);
        assert_eq!(reconstruction_error(&w, &w, &x).unwrap(), 0.0);
        assert_eq!(
            reconstruction_error(&w, &p, &Matrix::zeros(6, 4)).unwrap(),
            0.0
        );
        // Hand instance: delta = [[1, 0], [0, 2]], x = [[1, 1]] -> ‖[1, 2]‖ = √5.
        let e = reconstruction_error(
            &Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, 2.0]]),
            &Matrix::from_rows(&[vec![0.0, 3.0], vec![5.0, 0.0]]),
            &Matrix::from_rows(&[vec![1.0, 1.0]]),
        )
        .unwrap();
        assert!((e - 5f64.sqrt()).abs() < 1e-15);
    }
}
