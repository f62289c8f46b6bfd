//! Gradient flow of free particles on the unit hypersphere under the
//! dispersive and anchoring losses.
//!
//! Each step computes Euclidean gradients of
//! `lambda_intra * L_intra + lambda_inter * L_inter (+ conflict)`, maps them to
//! the tangent space, takes an explicit Euler step and renormalizes.
//! The optional conflict term `(c/B) sum_i sum_m (1 - <z_i^m, a_i^m>)` pulls
//! every modality toward its own fixed anchor, which creates a known modality
//! gap: the free optimum is `z_i^m = a_i^m` (value 0) and the tied optimum puts
//! every modality at the normalized anchor sum, costing
//! `(c/B) sum_i (M - ||sum_m a_i^m||)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{cross_modal_deviation, effective_rank};
use crate::error::{DagrError, Result};
use crate::geom::{covariance, pairwise_sq_dists, EmbeddingBatch, ModalityBatchSet, DEFAULT_NORM_EPS};
use crate::losses::{
    anchoring_loss, intra_loss, repulsion_weights, AnchorConfig, Dispersion, DEFAULT_T, DEFAULT_TAU,
};
use crate::rng::SplitMix64;

/// How the Euclidean gradient is turned into a step on the sphere.
///
/// On unit-norm particles both modes give the same direction: the Jacobian of
/// `z / ||z||` at a unit vector is the tangent projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Project onto the tangent space, step, renormalize.
    #[default]
    Riemannian,
    /// Treat the particle as a pre-normalization variable and pull the
    /// gradient back through the normalization map, then renormalize.
    ChainThroughNormalization,
}

impl std::str::FromStr for Projection {
    type Err = DagrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "riemannian" => Ok(Self::Riemannian),
            "chain-through-normalization" => Ok(Self::ChainThroughNormalization),
            other => Err(DagrError::Range {
                key: "projection".into(),
                reason: format!("unknown mode {other:?}"),
            }),
        }
    }
}

/// Initial particle configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlowInit {
    /// All particles at `e1` plus Gaussian jitter of the given scale.
    CollapsedCluster { jitter: f64 },
    UniformRandom,
    /// Explicit rows, one `B x d` matrix per modality (row-major rows).
    Custom { batches: Vec<Vec<Vec<f64>>> },
}

impl Default for FlowInit {
    fn default() -> Self {
        Self::CollapsedCluster { jitter: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub batch: usize,
    pub dim: usize,
    pub modalities: usize,
    pub eta: f64,
    pub steps: usize,
    pub t: f64,
    pub tau: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    /// Strength `c` of the per-modality anchor pull; 0 disables it.
    pub conflict: f64,
    pub projection: Projection,
    pub init: FlowInit,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            dim: 8,
            modalities: 1,
            eta: 0.05,
            steps: 2000,
            t: DEFAULT_T,
            tau: DEFAULT_TAU,
            lambda_intra: 1.0,
            lambda_inter: 0.0,
            conflict: 0.0,
            projection: Projection::Riemannian,
            init: FlowInit::default(),
            seed: 0,
        }
    }
}

fn range(key: &str, reason: impl Into<String>) -> DagrError {
    DagrError::Range {
        key: key.into(),
        reason: reason.into(),
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(range("eta", "must be > 0"));
        }
        if self.steps < 1 {
            return Err(range("steps", "must be >= 1"));
        }
        if self.batch < 2 {
            return Err(range("batch", "must be >= 2"));
        }
        if self.dim < 1 {
            return Err(range("dim", "must be >= 1"));
        }
        if self.modalities < 1 {
            return Err(range("modalities", "must be >= 1"));
        }
        if !(self.t > 0.0) {
            return Err(range("t", "must be > 0"));
        }
        if !(self.tau >= 0.0) {
            return Err(range("tau", "must be >= 0"));
        }
        for (k, v) in [
            ("lambda_intra", self.lambda_intra),
            ("lambda_inter", self.lambda_inter),
            ("conflict", self.conflict),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(range(k, "must be finite and >= 0"));
            }
        }
        if self.modalities < 2 && self.lambda_inter > 0.0 {
            return Err(range("lambda_inter", "anchoring needs at least two modalities"));
        }
        if let FlowInit::CollapsedCluster { jitter } = self.init {
            if !(jitter >= 0.0) {
                return Err(range("init.jitter", "must be >= 0"));
            }
        }
        Ok(())
    }

    fn dispersion(&self) -> Dispersion<'static> {
        Dispersion::Rbf { t: self.t }
    }
}

/// State of a flow: particles plus the fixed conflict anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub set: ModalityBatchSet,
    /// One unit-row matrix per modality; empty when the conflict is off.
    pub anchors: Vec<EmbeddingBatch>,
}

fn collapsed(b: usize, d: usize, jitter: f64, rng: &mut SplitMix64) -> Result<EmbeddingBatch> {
    let m = DMatrix::from_fn(b, d, |_, k| if k == 0 { 1.0 } else { 0.0 })
        + DMatrix::from_fn(b, d, |_, _| jitter * rng.normal());
    EmbeddingBatch::new(m)?.normalized()
}

/// Builds the initial state. Streams: 0 for particles, 1 for anchors.
pub fn initial_state(cfg: &FlowConfig) -> Result<FlowState> {
    cfg.validate()?;
    let mut rng = SplitMix64::derive(cfg.seed, 0);
    let batches = match &cfg.init {
        FlowInit::CollapsedCluster { jitter } => (0..cfg.modalities)
            .map(|_| collapsed(cfg.batch, cfg.dim, *jitter, &mut rng))
            .collect::<Result<Vec<_>>>()?,
        FlowInit::UniformRandom => (0..cfg.modalities)
            .map(|_| EmbeddingBatch::random_unit(cfg.batch, cfg.dim, &mut rng))
            .collect::<Result<Vec<_>>>()?,
        FlowInit::Custom { batches } => {
            if batches.len() != cfg.modalities {
                return Err(DagrError::ShapeMismatch(format!(
                    "custom init has {} modalities, config says {}",
                    batches.len(),
                    cfg.modalities
                )));
            }
            batches
                .iter()
                .map(|rows| {
                    let b = EmbeddingBatch::from_rows(rows)?;
                    if b.rows() != cfg.batch || b.dim() != cfg.dim {
                        return Err(DagrError::ShapeMismatch(format!(
                            "custom init block is {}x{}, expected {}x{}",
                            b.rows(),
                            b.dim(),
                            cfg.batch,
                            cfg.dim
                        )));
                    }
                    b.normalized()
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let anchors = if cfg.conflict > 0.0 {
        let mut arng = SplitMix64::derive(cfg.seed, 1);
        (0..cfg.modalities)
            .map(|_| EmbeddingBatch::random_unit(cfg.batch, cfg.dim, &mut arng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(FlowState {
        set: ModalityBatchSet::unlabeled(batches)?,
        anchors,
    })
}

/// Value of the conflict term and its (constant) gradient blocks.
fn conflict_term(state: &FlowState, c: f64) -> (f64, Vec<DMatrix<f64>>) {
    let b = state.set.samples() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(state.anchors.len());
    for (z, a) in state.set.batches.iter().zip(&state.anchors) {
        let dots = z.data().component_mul(a.data()).column_sum();
        value += dots.iter().map(|v| c * (1.0 - v)).sum::<f64>() / b;
        grads.push(a.data() * (-c / b));
    }
    (value, grads)
}

/// `(c/B) sum_i (M - ||sum_m a_i^m||)`: conflict cost of the best tied state.
pub fn exact_conflict_gap(state: &FlowState, c: f64) -> f64 {
    let Some(first) = state.anchors.first() else {
        return 0.0;
    };
    let m = state.anchors.len() as f64;
    let mut sum = DMatrix::zeros(first.rows(), first.dim());
    for a in &state.anchors {
        sum += a.data();
    }
    let b = first.rows() as f64;
    (0..first.rows())
        .map(|i| c * (m - sum.row(i).norm()))
        .sum::<f64>()
        / b
}

/// Loss components at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowLosses {
    pub total: f64,
    pub disp: f64,
    pub anchor: f64,
    pub conflict: f64,
}

fn losses_and_grads(state: &FlowState, cfg: &FlowConfig) -> Result<(FlowLosses, Vec<DMatrix<f64>>)> {
    let set = &state.set;
    let mut grads: Vec<DMatrix<f64>> = set
        .batches
        .iter()
        .map(|b| DMatrix::zeros(b.rows(), b.dim()))
        .collect();
    let intra = intra_loss(set, cfg.dispersion())?;
    for (g, h) in grads.iter_mut().zip(&intra.grads) {
        *g += h * cfg.lambda_intra;
    }
    let anchor = if set.modalities() >= 2 {
        let a = anchoring_loss(set, AnchorConfig::new(cfg.tau)?)?;
        for (g, h) in grads.iter_mut().zip(&a.grads) {
            *g += h * cfg.lambda_inter;
        }
        a.value
    } else {
        0.0
    };
    let conflict = if cfg.conflict > 0.0 {
        let (v, cg) = conflict_term(state, cfg.conflict);
        for (g, h) in grads.iter_mut().zip(&cg) {
            *g += h;
        }
        v
    } else {
        0.0
    };
    let losses = FlowLosses {
        total: cfg.lambda_intra * intra.value + cfg.lambda_inter * anchor + conflict,
        disp: intra.value,
        anchor,
        conflict,
    };
    Ok((losses, grads))
}

pub fn flow_losses(state: &FlowState, cfg: &FlowConfig) -> Result<FlowLosses> {
    losses_and_grads(state, cfg).map(|(l, _)| l)
}

/// One projected gradient step followed by renormalization.
pub fn flow_step(state: &FlowState, cfg: &FlowConfig) -> Result<FlowState> {
    cfg.validate()?;
    let (_, grads) = losses_and_grads(state, cfg)?;
    let mut batches = Vec::with_capacity(grads.len());
    for (z, g) in state.set.batches.iter().zip(grads) {
        let tangent = match cfg.projection {
            Projection::Riemannian => {
                let zd = z.data();
                let radial = zd.component_mul(&g).column_sum();
                let mut tg = g;
                for i in 0..zd.nrows() {
                    let r = radial[i];
                    for k in 0..zd.ncols() {
                        tg[(i, k)] -= r * zd[(i, k)];
                    }
                }
                tg
            }
            Projection::ChainThroughNormalization => {
                crate::losses::chain_through_normalization(z, &g, DEFAULT_NORM_EPS)?
            }
        };
        let moved = z.data() - tangent * cfg.eta;
        batches.push(EmbeddingBatch::new(moved)?.normalized()?);
    }
    Ok(FlowState {
        set: ModalityBatchSet::unlabeled(batches)?,
        anchors: state.anchors.clone(),
    })
}

/// Per-step diagnostics of a flow run; every series has `steps + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: FlowConfig,
    pub loss_total: Vec<f64>,
    /// Mean per-modality dispersive loss `L_intra`.
    pub loss_disp: Vec<f64>,
    /// `L_inter`; zero for single-modality runs.
    pub loss_anchor: Vec<f64>,
    pub loss_conflict: Vec<f64>,
    /// Smallest Euclidean distance between distinct particles of one modality.
    pub min_pair_dist: Vec<f64>,
    /// `eff_rank[m][step]`.
    pub eff_rank: Vec<Vec<f64>>,
    /// `E[(d - tau)_+^2]`; equals `loss_anchor`.
    pub excess_drift: Vec<f64>,
    /// `E[d^2]` over matched particles; zero for single-modality runs.
    pub mean_sq_drift: Vec<f64>,
    /// Smallest repulsion weight over all pairs and modalities (never negative).
    pub min_repulsion_weight: Vec<f64>,
    /// Whether every particle norm was within 1e-9 of one after each step.
    pub max_norm_error: f64,
    /// Conflict cost of the best tied state, when the conflict term is on.
    pub conflict_gap: Option<f64>,
}

impl TrajectoryRecord {
    fn with_capacity(cfg: &FlowConfig) -> Self {
        let n = cfg.steps + 1;
        Self {
            config: cfg.clone(),
            loss_total: Vec::with_capacity(n),
            loss_disp: Vec::with_capacity(n),
            loss_anchor: Vec::with_capacity(n),
            loss_conflict: Vec::with_capacity(n),
            min_pair_dist: Vec::with_capacity(n),
            eff_rank: vec![Vec::with_capacity(n); cfg.modalities],
            excess_drift: Vec::with_capacity(n),
            mean_sq_drift: Vec::with_capacity(n),
            min_repulsion_weight: Vec::with_capacity(n),
            max_norm_error: 0.0,
            conflict_gap: None,
        }
    }

    fn record(&mut self, state: &FlowState, cfg: &FlowConfig) -> Result<()> {
        let l = flow_losses(state, cfg)?;
        self.loss_total.push(l.total);
        self.loss_disp.push(l.disp);
        self.loss_anchor.push(l.anchor);
        self.loss_conflict.push(l.conflict);
        self.excess_drift.push(l.anchor);
        let set = &state.set;
        let mut min_d = f64::INFINITY;
        let mut min_w = f64::INFINITY;
        for (m, b) in set.batches.iter().enumerate() {
            min_d = min_d.min(pairwise_sq_dists(b)?.min_distance());
            self.eff_rank[m].push(effective_rank(&covariance(b))?);
            let w = repulsion_weights(b, cfg.dispersion())?;
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    if i != j {
                        min_w = min_w.min(w[(i, j)]);
                    }
                }
            }
            for i in 0..b.rows() {
                let err = (b.data().row(i).norm() - 1.0).abs();
                self.max_norm_error = self.max_norm_error.max(err);
            }
        }
        self.min_pair_dist.push(min_d);
        self.min_repulsion_weight.push(min_w);
        self.mean_sq_drift.push(if set.modalities() >= 2 {
            cross_modal_deviation(set)?
        } else {
            0.0
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.loss_total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_total.is_empty()
    }

    /// Renyi-2 proxy series `-L_intra`.
    pub fn renyi2_proxy(&self) -> Vec<f64> {
        self.loss_disp.iter().map(|v| -v).collect()
    }

    /// Writes the per-step CSV with columns
    /// `step,loss_total,loss_disp,loss_anchor,min_pair_dist,eff_rank_m0..,excess_drift,mean_sq_drift`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("step,loss_total,loss_disp,loss_anchor,min_pair_dist");
        for m in 0..self.eff_rank.len() {
            header.push_str(&format!(",eff_rank_m{m}"));
        }
        header.push_str(",excess_drift,mean_sq_drift");
        writeln!(w, "{header}")?;
        for s in 0..self.len() {
            let mut line = format!(
                "{s},{:e},{:e},{:e},{:e}",
                self.loss_total[s], self.loss_disp[s], self.loss_anchor[s], self.min_pair_dist[s]
            );
            for er in &self.eff_rank {
                line.push_str(&format!(",{:e}", er[s]));
            }
            line.push_str(&format!(",{:e},{:e}", self.excess_drift[s], self.mean_sq_drift[s]));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Result of [`run_flow`]: the trajectory and the final particles.
#[derive(Debug, Clone)]
pub struct FlowRun {
    pub record: TrajectoryRecord,
    pub final_state: FlowState,
    /// States captured at the requested steps, in step order.
    pub snapshots: Vec<(usize, ModalityBatchSet)>,
}

pub fn run_flow(cfg: &FlowConfig) -> Result<TrajectoryRecord> {
    run_flow_full(cfg).map(|r| r.record)
}

pub fn run_flow_full(cfg: &FlowConfig) -> Result<FlowRun> {
    let state = initial_state(cfg)?;
    run_flow_from(cfg, state, &[])
}

/// Runs `cfg.steps` steps from `state`, capturing the particles after each
/// step listed in `snapshot_steps` (0 is the initial state).
pub fn run_flow_from(cfg: &FlowConfig, mut state: FlowState, snapshot_steps: &[usize]) -> Result<FlowRun> {
    cfg.validate()?;
    if let Some(&s) = snapshot_steps.iter().find(|&&s| s > cfg.steps) {
        return Err(DagrError::Range {
            key: "snapshot_steps".into(),
            reason: format!("step {s} exceeds the {} configured steps", cfg.steps),
        });
    }
    let mut snapshots = Vec::new();
    let mut rec = TrajectoryRecord::with_capacity(cfg);
    if cfg.conflict > 0.0 {
        rec.conflict_gap = Some(exact_conflict_gap(&state, cfg.conflict));
    }
    rec.record(&state, cfg)?;
    if snapshot_steps.contains(&0) {
        snapshots.push((0, state.set.clone()));
    }
    for step in 0..cfg.steps {
        state = flow_step(&state, cfg)?;
        rec.record(&state, cfg)?;
        if snapshot_steps.contains(&(step + 1)) {
            snapshots.push((step + 1, state.set.clone()));
        }
        if step % 500 == 0 {
            log::trace!("flow step {step}: loss {}", rec.loss_total[step + 1]);
        }
    }
    Ok(FlowRun {
        record: rec,
        final_state: state,
        snapshots,
    })
}

/// Runs independent configurations in parallel; results keep input order.
pub fn run_flow_sweep(cfgs: &[FlowConfig]) -> Vec<Result<TrajectoryRecord>> {
    cfgs.par_iter().map(run_flow).collect()
}

/// Steps `s` at which every matched pair lies inside the tolerance radius at
/// both `s` and `s + 1`, so the anchoring force is absent and the step is pure
/// dispersion (the drift constraint is slack).
pub fn slack_steps(rec: &TrajectoryRecord) -> Vec<usize> {
    (0..rec.len().saturating_sub(1))
        .filter(|&s| rec.excess_drift[s] == 0.0 && rec.excess_drift[s + 1] == 0.0)
        .collect()
}

/// Largest decrease of the Renyi-2 proxy over slack steps (0 if none).
pub fn max_entropy_violation(rec: &TrajectoryRecord) -> f64 {
    let h = rec.renyi2_proxy();
    slack_steps(rec)
        .into_iter()
        .map(|s| (h[s] - h[s + 1]).max(0.0))
        .fold(0.0, f64::max)
}
