//! Dispersive (intra-modal) and anchoring (inter-modal) regularizers with
//! exact analytic gradients.
//!
//! Conventions:
//! - potentials act on the *squared* distance `s = ||z_i - z_j||^2`;
//! - pair sums run over ordered pairs, so each unordered pair is counted
//!   twice and the averages use `B(B-1)` and `M(M-1)`;
//! - gradients are taken with respect to the normalized rows. Use
//!   [`chain_through_normalization`] to pull them back to encoder outputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DagrError, Result};
use crate::geom::{pairwise_sq_dists, EmbeddingBatch, ModalityBatchSet};

/// Default RBF temperature.
pub const DEFAULT_T: f64 = 2.0;
/// Default anchoring tolerance radius.
pub const DEFAULT_TAU: f64 = 0.25;

/// A non-increasing potential over squared distance.
pub trait DispersivePotential: Send + Sync {
    fn value(&self, s: f64) -> f64;
    /// Derivative (or a non-positive sub-derivative at kinks).
    fn derivative(&self, s: f64) -> f64;
}

/// `exp(-t s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfPotential {
    pub t: f64,
}

impl DispersivePotential for RbfPotential {
    fn value(&self, s: f64) -> f64 {
        (-self.t * s).exp()
    }

    fn derivative(&self, s: f64) -> f64 {
        -self.t * (-self.t * s).exp()
    }
}

/// `(margin - s)_+`, with sub-derivative 0 at the kink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HingePotential {
    pub margin: f64,
}

impl DispersivePotential for HingePotential {
    fn value(&self, s: f64) -> f64 {
        (self.margin - s).max(0.0)
    }

    fn derivative(&self, s: f64) -> f64 {
        if s < self.margin {
            -1.0
        } else {
            0.0
        }
    }
}

/// Probes a potential on a grid over `[0, 4]` (the squared-distance range on
/// the unit sphere) and rejects it if it increases anywhere.
pub fn check_monotone(potential: &dyn DispersivePotential) -> Result<()> {
    const PROBES: usize = 401;
    let mut prev = potential.value(0.0);
    for k in 0..PROBES {
        let s = 4.0 * k as f64 / (PROBES - 1) as f64;
        let v = potential.value(s);
        if v > prev + 1e-12 || potential.derivative(s) > 0.0 {
            return Err(DagrError::PotentialNotMonotone(s));
        }
        prev = v;
    }
    Ok(())
}

/// Scalar loss value plus one gradient block per input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<DMatrix<f64>>,
}

impl LossResult {
    fn zeros_like(set: &ModalityBatchSet) -> Self {
        Self {
            value: 0.0,
            grads: set
                .batches
                .iter()
                .map(|b| DMatrix::zeros(b.rows(), b.dim()))
                .collect(),
        }
    }

    /// `self + w * other`, block by block.
    pub fn add_scaled(&mut self, w: f64, other: &LossResult) {
        self.value += w * other.value;
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            *g += o * w;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Tolerance radius of the anchoring hinge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub tau: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl AnchorConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(DagrError::Range {
                key: "tau".into(),
                reason: format!("must be >= 0, got {tau}"),
            });
        }
        Ok(Self { tau })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagrWeights {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
}

impl DagrWeights {
    pub fn new(lambda_intra: f64, lambda_inter: f64) -> Result<Self> {
        for (key, v) in [("lambda_intra", lambda_intra), ("lambda_inter", lambda_inter)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DagrError::Range {
                    key: key.into(),
                    reason: format!("must be >= 0, got {v}"),
                });
            }
        }
        Ok(Self {
            lambda_intra,
            lambda_inter,
        })
    }
}

/// Which dispersive objective to use per modality.
#[derive(Clone, Copy)]
pub enum Dispersion<'a> {
    /// Log-mean-exp RBF uniformity with temperature `t`.
    Rbf { t: f64 },
    /// Pair-mean of an arbitrary non-increasing potential.
    Potential(&'a dyn DispersivePotential),
}

fn check_dispersive_input(batch: &EmbeddingBatch) -> Result<()> {
    if batch.rows() < 2 {
        return Err(DagrError::BatchTooSmall(batch.rows()));
    }
    batch.require_normalized()
}

/// Rows `sum_j c_ij (z_i - z_j)` for a zero-diagonal coefficient matrix.
fn pair_force(c: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = -(c * z);
    for (i, r) in c.row_iter().map(|r| r.sum()).enumerate() {
        for k in 0..z.ncols() {
            out[(i, k)] += r * z[(i, k)];
        }
    }
    out
}

/// `log( mean_{i != j} exp(-t ||z_i - z_j||^2) )` and its gradient.
///
/// The gradient on row `i` is `-4t sum_j w_ij (z_i - z_j)` where `w` is the
/// softmax of `-t s` over ordered pairs.
pub fn dispersive_loss_rbf(batch: &EmbeddingBatch, t: f64) -> Result<LossResult> {
    if !(t > 0.0) {
        return Err(DagrError::NonPositiveTemperature(t));
    }
    check_dispersive_input(batch)?;
    let b = batch.rows();
    let dm = pairwise_sq_dists(batch)?;
    let z = batch.data();

    let mut max_arg = f64::NEG_INFINITY;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                max_arg = max_arg.max(-t * dm.get(i, j));
            }
        }
    }
    let mut weights = DMatrix::zeros(b, b);
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                let e = (-t * dm.get(i, j) - max_arg).exp();
                weights[(i, j)] = e;
                total += e;
            }
        }
    }
    let pairs = (b * (b - 1)) as f64;
    let value = max_arg + total.ln() - pairs.ln();
    weights /= total;

    Ok(LossResult {
        value,
        grads: vec![pair_force(&weights, z) * (-4.0 * t)],
    })
}

/// Pair-mean `(1/(B(B-1))) sum_{i != j} psi(||z_i - z_j||^2)` and its gradient.
pub fn dispersive_loss_general(
    batch: &EmbeddingBatch,
    potential: &dyn DispersivePotential,
) -> Result<LossResult> {
    check_dispersive_input(batch)?;
    if cfg!(debug_assertions) {
        check_monotone(potential)?;
    }
    let b = batch.rows();
    let dm = pairwise_sq_dists(batch)?;
    let z = batch.data();
    let pairs = (b * (b - 1)) as f64;

    let mut value = 0.0;
    let mut coef = DMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let s = dm.get(i, j);
            value += potential.value(s);
            coef[(i, j)] = potential.derivative(s);
        }
    }
    Ok(LossResult {
        value: value / pairs,
        grads: vec![pair_force(&coef, z) * (4.0 / pairs)],
    })
}

/// Repulsion weights `w_ij >= 0` such that the negative gradient on row `i`
/// equals `sum_j w_ij (z_i - z_j)`.
pub fn repulsion_weights(batch: &EmbeddingBatch, dispersion: Dispersion<'_>) -> Result<DMatrix<f64>> {
    check_dispersive_input(batch)?;
    let b = batch.rows();
    let dm = pairwise_sq_dists(batch)?;
    let mut w = DMatrix::zeros(b, b);
    match dispersion {
        Dispersion::Potential(p) => {
            let pairs = (b * (b - 1)) as f64;
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        w[(i, j)] = -4.0 * p.derivative(dm.get(i, j)) / pairs;
                    }
                }
            }
        }
        Dispersion::Rbf { t } => {
            if !(t > 0.0) {
                return Err(DagrError::NonPositiveTemperature(t));
            }
            let mut max_arg = f64::NEG_INFINITY;
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        max_arg = max_arg.max(-t * dm.get(i, j));
                    }
                }
            }
            let mut total = 0.0;
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        let e = (-t * dm.get(i, j) - max_arg).exp();
                        w[(i, j)] = e;
                        total += e;
                    }
                }
            }
            w *= 4.0 * t / total;
        }
    }
    Ok(w)
}

pub fn dispersive_loss(batch: &EmbeddingBatch, dispersion: Dispersion<'_>) -> Result<LossResult> {
    match dispersion {
        Dispersion::Rbf { t } => dispersive_loss_rbf(batch, t),
        Dispersion::Potential(p) => dispersive_loss_general(batch, p),
    }
}

/// Per-modality dispersive losses, unaveraged, one entry per modality.
pub fn per_modality_dispersive(
    set: &ModalityBatchSet,
    dispersion: Dispersion<'_>,
) -> Result<Vec<LossResult>> {
    set.batches
        .iter()
        .map(|b| dispersive_loss(b, dispersion))
        .collect()
}

/// Mean of the per-modality dispersive losses; gradients scaled by `1/M`.
pub fn intra_loss(set: &ModalityBatchSet, dispersion: Dispersion<'_>) -> Result<LossResult> {
    let per = per_modality_dispersive(set, dispersion)?;
    let m = set.modalities() as f64;
    let mut out = LossResult::zeros_like(set);
    for (k, r) in per.into_iter().enumerate() {
        out.value += r.value / m;
        out.grads[k] = r.grads.into_iter().next().expect("one block") / m;
    }
    Ok(out)
}

/// Hinge-squared cross-modal drift beyond the tolerance radius, averaged over
/// samples and ordered modality pairs.
pub fn anchoring_loss(set: &ModalityBatchSet, cfg: AnchorConfig) -> Result<LossResult> {
    let d = set.require_anchorable()?;
    let m = set.modalities();
    let b = set.samples();
    let norm = (b * m * (m - 1)) as f64;
    let mut out = LossResult::zeros_like(set);
    let mut diff = vec![0.0; d];
    for i in 0..b {
        for p in 0..m {
            for q in (p + 1)..m {
                let zp = set.batches[p].data();
                let zq = set.batches[q].data();
                let mut sq = 0.0;
                for k in 0..d {
                    diff[k] = zp[(i, k)] - zq[(i, k)];
                    sq += diff[k] * diff[k];
                }
                let dist = sq.sqrt();
                let excess = (dist - cfg.tau).max(0.0);
                if excess == 0.0 {
                    continue;
                }
                // both orderings (p,q) and (q,p)
                out.value += 2.0 * excess * excess / norm;
                if dist > 0.0 {
                    let c = 4.0 * excess / (dist * norm);
                    for k in 0..d {
                        out.grads[p][(i, k)] += c * diff[k];
                        out.grads[q][(i, k)] -= c * diff[k];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `lambda_intra * L_intra(RBF, t) + lambda_inter * L_inter(tau)`.
pub fn dagr_total(
    set: &ModalityBatchSet,
    weights: DagrWeights,
    anchor: AnchorConfig,
    t: f64,
) -> Result<LossResult> {
    let mut out = LossResult::zeros_like(set);
    let intra = intra_loss(set, Dispersion::Rbf { t })?;
    out.add_scaled(weights.lambda_intra, &intra);
    if set.modalities() >= 2 || weights.lambda_inter != 0.0 {
        let inter = anchoring_loss(set, anchor)?;
        out.add_scaled(weights.lambda_inter, &inter);
    }
    Ok(out)
}

/// Pulls gradients on normalized rows back to the pre-normalization rows:
/// row `i` becomes `(I - u u^T) g_i / ||z_i||` with `u = z_i / ||z_i||`.
pub fn chain_through_normalization(
    pre_norm: &EmbeddingBatch,
    grads_on_normalized: &DMatrix<f64>,
    eps: f64,
) -> Result<DMatrix<f64>> {
    let z = pre_norm.data();
    if grads_on_normalized.shape() != z.shape() {
        return Err(DagrError::ShapeMismatch(format!(
            "gradient {:?} vs batch {:?}",
            grads_on_normalized.shape(),
            z.shape()
        )));
    }
    let mut out = grads_on_normalized.clone();
    for i in 0..z.nrows() {
        let n = z.row(i).norm();
        if n < eps {
            return Err(DagrError::DegenerateNorm(i));
        }
        let g = grads_on_normalized.row(i);
        let radial = z.row(i).dot(&g) / (n * n);
        for k in 0..z.ncols() {
            out[(i, k)] = (g[k] - radial * z[(i, k)]) / n;
        }
    }
    Ok(out)
}
