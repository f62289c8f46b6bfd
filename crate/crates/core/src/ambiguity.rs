//! Logit-preserving orthogonal maps.
//!
//! For a linear head `W` (`K x d`) with rank `r < d`, any orthogonal `Q` acting
//! on the null space of `W` yields `R = V1 V1^T + V0 Q V0^T` with `W R = W`.
//! Embeddings `z` and `R z` then produce identical logits and task loss while
//! having different geometry.
//!
//! `V1` holds the right singular vectors of `W` whose singular values exceed
//! `tol * sigma_max`. `V0` is obtained by running the standard basis
//! `e_1, ..., e_d` in order through Gram-Schmidt (two passes) against `V1`
//! and the already accepted null vectors, keeping vectors with residual norm
//! above `1e-8`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::ce_loss_and_grad;
use crate::error::{DagrError, Result};
use crate::geom::EmbeddingBatch;

/// Default relative singular-value cutoff for rank detection.
pub const RANK_TOL: f64 = 1e-10;

/// Orthogonal block applied on the null space.
#[derive(Debug, Clone, PartialEq)]
pub enum NullBlock {
    Identity,
    /// `Q = -I`.
    NegateNull,
    /// Explicit `(d-r) x (d-r)` orthogonal matrix.
    Custom(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceRotation {
    pub w: DMatrix<f64>,
    /// `d x (d-r)`, orthonormal columns.
    pub v0: DMatrix<f64>,
    /// `d x r`, orthonormal columns.
    pub v1: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub rank: usize,
}

impl NullSpaceRotation {
    /// `max |R^T R - I|`.
    pub fn orthogonality_residual(&self) -> f64 {
        let d = self.r.nrows();
        (self.r.transpose() * &self.r - DMatrix::identity(d, d)).amax()
    }

    /// `max |W R - W|`.
    pub fn logit_residual(&self) -> f64 {
        (&self.w * &self.r - &self.w).amax()
    }

    /// Applies `R` to every row: `z_i -> R z_i`.
    pub fn apply(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        let rotated = batch.data() * self.r.transpose();
        if batch.is_normalized() {
            // orthogonal maps keep unit rows unit; re-check rather than assume
            EmbeddingBatch::new_normalized(rotated)
        } else {
            EmbeddingBatch::new(rotated)
        }
    }
}

fn row_space_basis(w: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let d = w.ncols();
    if w.nrows() == 0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = w.clone().svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let smax = svd.singular_values.max();
    let cols: Vec<_> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| smax > 0.0 && **s > tol * smax)
        .map(|(i, _)| vt.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn complement_basis(v1: &DMatrix<f64>) -> DMatrix<f64> {
    let d = v1.nrows();
    let mut basis: Vec<nalgebra::DVector<f64>> = v1.column_iter().map(|c| c.into_owned()).collect();
    let mut null = Vec::new();
    for k in 0..d {
        let mut v = nalgebra::DVector::zeros(d);
        v[k] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            v /= n;
            basis.push(v.clone());
            null.push(v);
        }
        if null.len() + v1.ncols() == d {
            break;
        }
    }
    if null.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&null)
    }
}

/// Builds `R` for head `w` and null-space block `q`.
pub fn build_nullspace_rotation(w: &DMatrix<f64>, q: &NullBlock, tol: f64) -> Result<NullSpaceRotation> {
    if !(tol > 0.0) {
        return Err(DagrError::Range {
            key: "tol".into(),
            reason: "must be > 0".into(),
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(DagrError::NonFiniteInput("classifier weights"));
    }
    let d = w.ncols();
    let v1 = row_space_basis(w, tol);
    let rank = v1.ncols();
    if rank >= d {
        return Err(DagrError::TrivialNullSpace(d));
    }
    let v0 = complement_basis(&v1);
    let n = d - rank;
    let q = match q {
        NullBlock::Identity => DMatrix::identity(n, n),
        NullBlock::NegateNull => -DMatrix::identity(n, n),
        NullBlock::Custom(m) => {
            if m.shape() != (n, n) {
                return Err(DagrError::ShapeMismatch(format!(
                    "null block must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if (m.transpose() * m - DMatrix::identity(n, n)).amax() > 1e-10 {
                return Err(DagrError::Range {
                    key: "q".into(),
                    reason: "null block is not orthogonal".into(),
                });
            }
            m.clone()
        }
    };
    let r = &v1 * v1.transpose() + &v0 * &q * v0.transpose();
    Ok(NullSpaceRotation {
        w: w.clone(),
        v0,
        v1,
        q,
        r,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    /// `max |CE(W R z) - CE(W z)|` over modalities.
    pub max_ce_deviation: f64,
    /// Largest absolute logit change over all samples and modalities.
    pub max_logit_deviation: f64,
    /// Mean of `||R z - z||` over all samples and modalities.
    pub mean_geometric_change: f64,
    pub max_orthogonality_residual: f64,
    pub max_head_residual: f64,
}

/// Compares task loss and logits before and after applying one rotation per
/// modality to that modality's embeddings.
pub fn certify_ambiguity(
    heads: &[DMatrix<f64>],
    embeddings: &[EmbeddingBatch],
    labels: &[usize],
    rotations: &[NullSpaceRotation],
) -> Result<AmbiguityReport> {
    if heads.len() != embeddings.len() || heads.len() != rotations.len() {
        return Err(DagrError::ShapeMismatch(
            "need one head, batch and rotation per modality".into(),
        ));
    }
    let mut rep = AmbiguityReport {
        max_ce_deviation: 0.0,
        max_logit_deviation: 0.0,
        mean_geometric_change: 0.0,
        max_orthogonality_residual: 0.0,
        max_head_residual: 0.0,
    };
    let mut count = 0usize;
    for ((w, z), rot) in heads.iter().zip(embeddings).zip(rotations) {
        let rz = z.data() * rot.r.transpose();
        let before = ce_loss_and_grad(w, z.data(), labels)?.value;
        let after = ce_loss_and_grad(w, &rz, labels)?.value;
        rep.max_ce_deviation = rep.max_ce_deviation.max((after - before).abs());
        let dl = (z.data() * w.transpose() - &rz * w.transpose()).amax();
        rep.max_logit_deviation = rep.max_logit_deviation.max(dl);
        for i in 0..z.rows() {
            rep.mean_geometric_change += (rz.row(i) - z.data().row(i)).norm();
        }
        count += z.rows();
        rep.max_orthogonality_residual = rep.max_orthogonality_residual.max(rot.orthogonality_residual());
        rep.max_head_residual = rep.max_head_residual.max((w * &rot.r - w).amax());
    }
    if count > 0 {
        rep.mean_geometric_change /= count as f64;
    }
    Ok(rep)
}
