//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each instance draws a random shape (`2 <= B <= max_batch`,
//! `2 <= d <= max_dim`, two or three modalities) and checks:
//!
//! * the RBF dispersive loss, the general pair-mean loss with RBF and hinge
//!   potentials, the modality-averaged intra loss and the anchoring loss, all
//!   as functions of the (ambient) embedding coordinates;
//! * cross-entropy with respect to the embeddings and to the head;
//! * the weighted regularizer composed with row normalization;
//! * the full pipeline `encoders -> CE + regularizers through normalization`
//!   with respect to every encoder and head parameter.
//!
//! Losses on the sphere are evaluated off-sphere for the perturbations; their
//! formulas are valid in ambient space.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ce_loss_and_grad, finite_diff_check, Activation, Encoder, EncoderSpec, GradCheck};
use crate::error::{DagrError, Result};
use crate::geom::{normalize_batch, EmbeddingBatch, ModalityBatchSet, DEFAULT_NORM_EPS};
use crate::losses::{
    anchoring_loss, chain_through_normalization, dagr_total, dispersive_loss_general, dispersive_loss_rbf,
    intra_loss, AnchorConfig, DagrWeights, Dispersion, HingePotential, LossResult, RbfPotential,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradSuiteConfig {
    pub instances: usize,
    pub max_batch: usize,
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negative control: scales every analytic gradient by `1 + 1e-3`.
    pub corrupt_gradient: bool,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            max_batch: 16,
            max_dim: 8,
            step: 1e-3,
            tolerance: 1e-5,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

impl GradSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: &str| DagrError::Range {
            key: key.into(),
            reason: reason.into(),
        };
        if self.instances == 0 {
            return Err(err("instances", "must be >= 1"));
        }
        if self.max_batch < 2 {
            return Err(err("max_batch", "must be >= 2"));
        }
        if self.max_dim < 2 {
            return Err(err("max_dim", "must be >= 2"));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(err("step", "must be > 0"));
        }
        if !(self.tolerance > 0.0) {
            return Err(err("tolerance", "must be > 0"));
        }
        Ok(())
    }
}

/// Worst relative error of one gradient across all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub coordinates_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub instances: usize,
    pub tolerance: f64,
    pub checks: Vec<CheckSummary>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Names of the checks, in report order.
pub const CHECK_NAMES: [&str; 10] = [
    "dispersive_rbf",
    "dispersive_general_rbf",
    "dispersive_general_hinge",
    "intra",
    "anchoring",
    "ce_embeddings",
    "ce_head",
    "composite_normalized",
    "pipeline_encoders",
    "pipeline_heads",
];

struct Instance {
    b: usize,
    d: usize,
    m: usize,
    k: usize,
    t: f64,
    tau: f64,
    margin: f64,
    weights: DagrWeights,
    raw: Vec<DMatrix<f64>>,
    labels: Vec<usize>,
    heads: Vec<DMatrix<f64>>,
    inputs: Vec<DMatrix<f64>>,
    encoders: Vec<Encoder>,
}

fn unit_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut r in out.row_iter_mut() {
        let n = r.norm();
        r /= n;
    }
    out
}

fn sample_instance(cfg: &GradSuiteConfig, rng: &mut SplitMix64) -> Result<Instance> {
    let b = 2 + rng.below(cfg.max_batch - 1);
    let d = 2 + rng.below(cfg.max_dim - 1);
    let m = 2 + rng.below(2);
    let k = 2 + rng.below(3);
    let t = rng.uniform(0.5, 3.0);
    let weights = DagrWeights::new(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0))?;
    let raw: Vec<_> = (0..m).map(|_| DMatrix::from_fn(b, d, |_, _| rng.normal())).collect();
    let labels = (0..b).map(|_| rng.below(k)).collect();
    // unit-variance logits; saturated softmax gradients sit at the round-off floor
    let scale = 1.0 / (d as f64).sqrt();
    let heads = (0..m).map(|_| DMatrix::from_fn(k, d, |_, _| scale * rng.normal())).collect();
    let in_dim = 2 + rng.below(5);
    let hidden = 2 + rng.below(5);
    let inputs = (0..m).map(|_| DMatrix::from_fn(b, in_dim, |_, _| rng.normal())).collect();
    let encoders = (0..m)
        .map(|i| {
            let spec = EncoderSpec::uniform(vec![in_dim, hidden, d], Activation::Tanh, rng.next_u64())?;
            Encoder::init(spec, format!("encoder_{i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    // keep every kink (hinge margin on squared distances, anchoring radius on
    // cross-modal distances) away from the data so differences stay smooth;
    // a coordinate step of h moves a squared distance by at most ~4h
    let guard = (20.0 * cfg.step).max(1e-3);
    let units: Vec<_> = raw.iter().map(unit_rows).collect();
    let sq: Vec<f64> = units
        .iter()
        .flat_map(|u| (0..b).flat_map(move |i| (0..b).filter(move |&j| j != i).map(move |j| (u.row(i) - u.row(j)).norm_squared())))
        .collect();
    let margin = clear_of(rng, 0.5, 3.5, &sq, guard);
    let mut cross = cross_distances(&units);
    let encoded = encoders
        .iter()
        .zip(&inputs)
        .map(|(e, x)| e.forward(x).map(|(z, _)| unit_rows(z.data())))
        .collect::<Result<Vec<_>>>()?;
    cross.extend(cross_distances(&encoded));
    let tau = clear_of(rng, 0.0, 0.5, &cross, guard);
    Ok(Instance {
        b,
        d,
        m,
        k,
        t,
        tau,
        margin,
        weights,
        raw,
        labels,
        heads,
        inputs,
        encoders,
    })
}

/// Draws from `[lo, hi)` until no value of `avoid` is within `guard`.
fn clear_of(rng: &mut SplitMix64, lo: f64, hi: f64, avoid: &[f64], guard: f64) -> f64 {
    let mut v = rng.uniform(lo, hi);
    for _ in 0..100 {
        if avoid.iter().all(|a| (a - v).abs() >= guard) {
            break;
        }
        v = rng.uniform(lo, hi);
    }
    v
}

fn cross_distances(units: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (a, u) in units.iter().enumerate() {
        for v in &units[a + 1..] {
            out.extend((0..u.nrows()).map(|i| (u.row(i) - v.row(i)).norm()));
        }
    }
    out
}

fn to_matrix(x: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, x)
}

fn flat_rows(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().iter().copied().collect()
}

fn ambient_set(x: &[f64], m: usize, b: usize, d: usize) -> ModalityBatchSet {
    let batches = (0..m)
        .map(|k| EmbeddingBatch::assume_normalized(to_matrix(&x[k * b * d..(k + 1) * b * d], b, d)))
        .collect();
    ModalityBatchSet::unlabeled(batches).expect("shapes are consistent")
}

fn flat_loss(r: &LossResult) -> Vec<f64> {
    r.grads.iter().flat_map(flat_rows).collect()
}

fn corrupt(mut g: Vec<f64>, on: bool) -> Vec<f64> {
    if on {
        for v in &mut g {
            *v *= 1.0 + 1e-3;
        }
    }
    g
}

/// Forward and gradient of `sum_m CE_m(W_m, phi_m(x_m)) + DAGR(normalize(phi(x)))`
/// over concatenated encoder parameters followed by the heads.
fn pipeline(inst: &Instance, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut offset = 0;
    let mut encs = inst.encoders.clone();
    for e in &mut encs {
        let n = e.num_params();
        e.set_flat(&params[offset..offset + n])?;
        offset += n;
    }
    let heads: Vec<_> = (0..inst.m)
        .map(|k| to_matrix(&params[offset + k * inst.k * inst.d..offset + (k + 1) * inst.k * inst.d], inst.k, inst.d))
        .collect();

    let mut value = 0.0;
    let mut raw = Vec::with_capacity(inst.m);
    let mut tapes = Vec::with_capacity(inst.m);
    let mut ups = Vec::with_capacity(inst.m);
    let mut head_grads = Vec::with_capacity(inst.m);
    for (k, enc) in encs.iter().enumerate() {
        let (z, tape) = enc.forward(&inst.inputs[k])?;
        let ce = ce_loss_and_grad(&heads[k], z.data(), &inst.labels)?;
        value += ce.value;
        ups.push(ce.grad_z);
        head_grads.push(ce.grad_w);
        raw.push(z);
        tapes.push(tape);
    }
    let unit = raw
        .iter()
        .map(|z| normalize_batch(z, DEFAULT_NORM_EPS).map(|n| n.batch))
        .collect::<Result<Vec<_>>>()?;
    let reg = dagr_total(
        &ModalityBatchSet::unlabeled(unit)?,
        inst.weights,
        AnchorConfig::new(inst.tau)?,
        inst.t,
    )?;
    value += reg.value;
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..inst.m {
        ups[k] += chain_through_normalization(&raw[k], &reg.grads[k], DEFAULT_NORM_EPS)?;
        grad.extend(tapes[k].backward(&ups[k])?.values);
    }
    for g in &head_grads {
        grad.extend(flat_rows(g));
    }
    Ok((value, grad))
}

fn check_instance(inst: &Instance, cfg: &GradSuiteConfig) -> Result<Vec<GradCheck>> {
    let (b, d, m) = (inst.b, inst.d, inst.m);
    let h = cfg.step;
    let bad = cfg.corrupt_gradient;
    let single = flat_rows(&unit_rows(&inst.raw[0]));
    let all: Vec<f64> = inst.raw.iter().flat_map(|x| flat_rows(&unit_rows(x))).collect();
    let mut out = Vec::with_capacity(CHECK_NAMES.len());

    let one = |x: &[f64]| EmbeddingBatch::assume_normalized(to_matrix(x, b, d));
    out.push(finite_diff_check(
        |x| {
            let r = dispersive_loss_rbf(&one(x), inst.t).expect("valid batch");
            (r.value, corrupt(flat_loss(&r), bad))
        },
        &single,
        h,
    ));
    let rbf = RbfPotential { t: inst.t };
    out.push(finite_diff_check(
        |x| {
            let r = dispersive_loss_general(&one(x), &rbf).expect("valid batch");
            (r.value, corrupt(flat_loss(&r), bad))
        },
        &single,
        h,
    ));
    let hinge = HingePotential { margin: inst.margin };
    out.push(finite_diff_check(
        |x| {
            let r = dispersive_loss_general(&one(x), &hinge).expect("valid batch");
            (r.value, corrupt(flat_loss(&r), bad))
        },
        &single,
        h,
    ));
    out.push(finite_diff_check(
        |x| {
            let r = intra_loss(&ambient_set(x, m, b, d), Dispersion::Rbf { t: inst.t }).expect("valid set");
            (r.value, corrupt(flat_loss(&r), bad))
        },
        &all,
        h,
    ));
    let anchor = AnchorConfig::new(inst.tau)?;
    out.push(finite_diff_check(
        |x| {
            let r = anchoring_loss(&ambient_set(x, m, b, d), anchor).expect("valid set");
            (r.value, corrupt(flat_loss(&r), bad))
        },
        &all,
        h,
    ));

    let raw0 = flat_rows(&inst.raw[0]);
    out.push(finite_diff_check(
        |x| {
            let r = ce_loss_and_grad(&inst.heads[0], &to_matrix(x, b, d), &inst.labels).expect("valid");
            (r.value, corrupt(flat_rows(&r.grad_z), bad))
        },
        &raw0,
        h,
    ));
    out.push(finite_diff_check(
        |x| {
            let r = ce_loss_and_grad(&to_matrix(x, inst.k, d), &inst.raw[0], &inst.labels).expect("valid");
            (r.value, corrupt(flat_rows(&r.grad_w), bad))
        },
        &flat_rows(&inst.heads[0]),
        h,
    ));

    let raw_all: Vec<f64> = inst.raw.iter().flat_map(flat_rows).collect();
    out.push(finite_diff_check(
        |x| {
            let pre: Vec<_> = (0..m)
                .map(|k| EmbeddingBatch::new(to_matrix(&x[k * b * d..(k + 1) * b * d], b, d)).expect("finite"))
                .collect();
            let unit = pre
                .iter()
                .map(|z| normalize_batch(z, DEFAULT_NORM_EPS).expect("nonzero rows").batch)
                .collect();
            let set = ModalityBatchSet::unlabeled(unit).expect("consistent");
            let r = dagr_total(&set, inst.weights, anchor, inst.t).expect("valid set");
            let g: Vec<f64> = pre
                .iter()
                .zip(&r.grads)
                .flat_map(|(z, g)| flat_rows(&chain_through_normalization(z, g, DEFAULT_NORM_EPS).expect("nonzero")))
                .collect();
            (r.value, corrupt(g, bad))
        },
        &raw_all,
        h,
    ));

    let mut params: Vec<f64> = inst.encoders.iter().flat_map(|e| e.flatten()).collect();
    let n_enc = params.len();
    for w in &inst.heads {
        params.extend(flat_rows(w));
    }
    let full = |x: &[f64]| {
        let (v, g) = pipeline(inst, x).expect("pipeline runs");
        (v, corrupt(g, bad))
    };
    // split the report between encoder and head coordinates
    let (_, analytic) = full(&params);
    let encoder_part = finite_diff_check(
        |x| {
            let mut p = x.to_vec();
            p.extend_from_slice(&params[n_enc..]);
            let (v, _) = full(&p);
            (v, analytic[..n_enc].to_vec())
        },
        &params[..n_enc],
        h,
    );
    let head_part = finite_diff_check(
        |x| {
            let mut p = params[..n_enc].to_vec();
            p.extend_from_slice(x);
            let (v, _) = full(&p);
            (v, analytic[n_enc..].to_vec())
        },
        &params[n_enc..],
        h,
    );
    out.push(encoder_part);
    out.push(head_part);
    Ok(out)
}

/// Runs every check on `cfg.instances` random instances.
pub fn run_gradient_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    cfg.validate()?;
    let mut rng = SplitMix64::derive(cfg.seed, 0);
    let mut checks: Vec<CheckSummary> = CHECK_NAMES
        .iter()
        .map(|n| CheckSummary {
            name: n.to_string(),
            max_rel_error: 0.0,
            worst_instance: 0,
            coordinates_checked: 0,
        })
        .collect();
    for i in 0..cfg.instances {
        let inst = sample_instance(cfg, &mut rng)?;
        for (s, r) in checks.iter_mut().zip(check_instance(&inst, cfg)?) {
            if r.max_rel_error > s.max_rel_error {
                s.max_rel_error = r.max_rel_error;
                s.worst_instance = i;
            }
            s.coordinates_checked += r.coordinates;
        }
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        instances: cfg.instances,
        tolerance: cfg.tolerance,
        passed: max_rel_error <= cfg.tolerance,
        checks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_and_corruption_fails() {
        let cfg = GradSuiteConfig {
            instances: 5,
            ..GradSuiteConfig::default()
        };
        let rep = run_gradient_suite(&cfg).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checks.len(), CHECK_NAMES.len());
        let bad = run_gradient_suite(&GradSuiteConfig {
            corrupt_gradient: true,
            ..cfg
        })
        .unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn rejects_bad_step() {
        let cfg = GradSuiteConfig {
            step: 0.0,
            ..GradSuiteConfig::default()
        };
        assert!(matches!(run_gradient_suite(&cfg), Err(DagrError::Range { key, .. }) if key == "step"));
    }
}
