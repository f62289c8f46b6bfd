//! Estimate of the irreducible modality gap
//! `delta = min_tied F - min_free F`, where `F` is the training objective
//! without the anchoring term: `sum_m CE_m + lambda_intra sum_m L_disp^m`
//! evaluated on the full training split.
//!
//! The free optimum comes from a full-batch run with `lambda_inter = 0`. Two
//! ways of tying the modalities are available:
//!
//! * [`TieMethod::Penalty`] (default): the same architecture trained on
//!   `F + Lambda * L_inter` with `tau = 0`. The tied value is the penalized
//!   objective `F + Lambda * L_inter` at that solution. At exact optima it
//!   never exceeds the true tied optimum (a tied point has `L_inter = 0`), and
//!   for every `lambda <= Lambda` it still bounds `lambda * L_inter` of the
//!   `lambda` run, which is what the drift bound consumes.
//! * [`TieMethod::AveragedInput`]: one shared encoder fed the mean of the
//!   modality inputs, read by every head. This needs equal input widths. When
//!   the input is wide enough to unmix the modalities it sees more signal
//!   than any single one and can come out negative.
//!
//! Both runs use the same budget (epochs, learning rate, seed).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{embedding_set, Dataset, GapEstimate, Model, Split, TrainConfig, TrainOptions};
use crate::autodiff::{ce_loss_and_grad, Encoder, EncoderSpec};
use crate::error::{DagrError, Result};
use crate::geom::{normalize_batch, DEFAULT_NORM_EPS};
use crate::losses::{anchoring_loss, chain_through_normalization, dispersive_loss_rbf, AnchorConfig};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TieMethod {
    Penalty { lambda: f64 },
    AveragedInput,
}

impl Default for TieMethod {
    fn default() -> Self {
        Self::Penalty { lambda: 10.0 }
    }
}

/// Objective pieces of a model on a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    /// `sum_m CE_m`.
    pub task: f64,
    /// `sum_m L_disp^m`.
    pub disp: f64,
    /// `L_inter` at the configured `tau`.
    pub inter: f64,
    /// `E[d^2]` over matched embeddings.
    pub mean_sq_drift: f64,
}

impl ObjectiveParts {
    /// `task + lambda_intra * disp`.
    pub fn non_anchoring(&self, lambda_intra: f64) -> f64 {
        self.task + lambda_intra * self.disp
    }
}

pub fn objective_parts(model: &Model, split: &Split, tau: f64, t: f64) -> Result<ObjectiveParts> {
    let z = model.embed(split)?;
    let mut task = 0.0;
    for (w, zm) in model.heads.iter().zip(&z) {
        task += ce_loss_and_grad(w, zm, &split.labels)?.value;
    }
    let set = embedding_set(model, split)?;
    let mut disp = 0.0;
    for b in &set.batches {
        disp += dispersive_loss_rbf(b, t)?.value;
    }
    Ok(ObjectiveParts {
        task,
        disp,
        inter: anchoring_loss(&set, AnchorConfig::new(tau)?)?.value,
        mean_sq_drift: crate::diagnostics::cross_modal_deviation(&set)?,
    })
}

fn lambda_disp(cfg: &TrainConfig) -> f64 {
    if cfg.dagr {
        cfg.lambda_intra
    } else {
        0.0
    }
}

/// Full-batch, fixed-weight configuration used by the gap runs.
fn gap_base(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 0,
        use_pareto: false,
        diag_every: 0,
        ..cfg.clone()
    }
}

/// Trains with fixed weights `(cfg.lambda_intra, lambda_inter)` at radius
/// `tau`, full batch, and returns the model.
pub fn train_fixed(data: &Dataset, cfg: &TrainConfig, lambda_inter: f64, tau: f64) -> Result<Model> {
    let run = TrainConfig {
        lambda_inter,
        tau,
        dagr: true,
        ..gap_base(cfg)
    };
    Ok(super::train_with(data, &run, &TrainOptions::default())?.model)
}

pub fn estimate_modality_gap(data: &Dataset, cfg: &TrainConfig, tie: TieMethod) -> Result<GapEstimate> {
    if data.modalities() != 2 {
        return Err(DagrError::Range {
            key: "modalities".into(),
            reason: "the gap estimate is defined for two modalities".into(),
        });
    }
    let lam = lambda_disp(cfg);
    let free = train_fixed(data, cfg, 0.0, 0.0)?;
    let free_obj = objective_parts(&free, &data.train, 0.0, cfg.t)?.non_anchoring(lam);
    let (tied_obj, residual, method) = match tie {
        TieMethod::Penalty { lambda } => {
            if !(lambda > 0.0) {
                return Err(DagrError::Range {
                    key: "tie.lambda".into(),
                    reason: "must be > 0".into(),
                });
            }
            let tied = train_fixed(data, cfg, lambda, 0.0)?;
            let parts = objective_parts(&tied, &data.train, 0.0, cfg.t)?;
            (
                parts.non_anchoring(lam) + lambda * parts.inter,
                parts.inter,
                format!("penalty(lambda={lambda})"),
            )
        }
        TieMethod::AveragedInput => {
            let v = train_averaged(data, &gap_base(cfg))?;
            (v, 0.0, "averaged-input".to_string())
        }
    };
    Ok(GapEstimate {
        delta_hat: tied_obj - free_obj,
        tied_objective: tied_obj,
        free_objective: free_obj,
        tied_residual_drift: residual,
        method,
    })
}

/// Shared encoder on the averaged inputs; returns the final non-anchoring
/// objective on the training split.
fn train_averaged(data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let dims = data.input_dims();
    if dims.iter().any(|&p| p != dims[0]) {
        return Err(DagrError::ShapeMismatch(
            "averaged-input tie needs equal input widths".into(),
        ));
    }
    let m_count = dims.len();
    let mut x = DMatrix::zeros(data.train.len(), dims[0]);
    for xm in &data.train.inputs {
        x += xm;
    }
    x /= m_count as f64;
    let labels = &data.train.labels;
    // reuse modality 0's initialization for the shared encoder
    let init = Model::init(&dims, data.classes(), cfg)?;
    let mut widths = vec![dims[0]];
    widths.extend(&cfg.hidden);
    widths.push(cfg.embed_dim);
    let seed = SplitMix64::derive(cfg.seed, 10).next_u64();
    let mut enc = Encoder::init(EncoderSpec::uniform(widths, cfg.activation, seed)?, "shared")?;
    let mut heads = init.heads;
    let lam = lambda_disp(cfg);

    let objective = |enc: &Encoder, heads: &[DMatrix<f64>]| -> Result<f64> {
        let z = enc.apply(&x)?;
        let mut task = 0.0;
        for w in heads {
            task += ce_loss_and_grad(w, &z, labels)?.value;
        }
        let unit = normalize_batch(&crate::geom::EmbeddingBatch::new(z)?, DEFAULT_NORM_EPS)?.batch;
        Ok(task + lam * m_count as f64 * dispersive_loss_rbf(&unit, cfg.t)?.value)
    };

    for _ in 0..cfg.epochs {
        let (z, mut tape) = enc.forward(&x)?;
        let mut up = DMatrix::zeros(z.rows(), z.dim());
        let mut head_grads = Vec::with_capacity(m_count);
        for w in &heads {
            let ce = ce_loss_and_grad(w, z.data(), labels)?;
            up += &ce.grad_z;
            head_grads.push(ce.grad_w);
        }
        if lam > 0.0 {
            let unit = normalize_batch(&z, DEFAULT_NORM_EPS)?.batch;
            let disp = dispersive_loss_rbf(&unit, cfg.t)?;
            let g = chain_through_normalization(&z, &disp.grads[0], DEFAULT_NORM_EPS)?;
            up += g * (lam * m_count as f64);
        }
        let g = tape.backward(&up)?;
        enc.apply_step(&g, cfg.lr)?;
        for (w, gw) in heads.iter_mut().zip(head_grads) {
            *w -= gw * cfg.lr;
        }
    }
    objective(&enc, &heads)
}
