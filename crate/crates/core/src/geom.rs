//! Embedding containers, hypersphere projection, pairwise squared distances
//! and the batch second-moment matrix.
//!
//! Batches are `B x d` matrices: one row per sample. All reductions run in a
//! fixed row-major order so results do not depend on scheduling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DagrError, Result};
use crate::rng::SplitMix64;

/// Tolerance used when checking that a row lies on the unit sphere.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Default epsilon guard for [`normalize_batch`].
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// A `B x d` block of sample embeddings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: DMatrix<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(DagrError::EmptyBatch {
                rows: data.nrows(),
                cols: data.ncols(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DagrError::NonFiniteInput("embedding batch"));
        }
        Ok(Self {
            data,
            normalized: false,
        })
    }

    /// Builds a batch and marks it normalized after checking every row norm.
    pub fn new_normalized(data: DMatrix<f64>) -> Result<Self> {
        let mut b = Self::new(data)?;
        if !b.rows_are_unit() {
            return Err(DagrError::NotNormalized);
        }
        b.normalized = true;
        Ok(b)
    }

    /// Marks `data` as normalized without checking row norms.
    ///
    /// Losses treat their input as points in ambient space, so this is how
    /// finite-difference checks evaluate them at off-sphere perturbations.
    pub fn assume_normalized(data: DMatrix<f64>) -> Self {
        Self {
            data,
            normalized: true,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(DagrError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(b, d, |i, j| rows[i][j]))
    }

    /// Random Gaussian rows projected to the sphere.
    pub fn random_unit(rows: usize, dim: usize, rng: &mut SplitMix64) -> Result<Self> {
        let raw = DMatrix::from_fn(rows, dim, |_, _| rng.normal());
        Ok(normalize_batch(&Self::new(raw)?, DEFAULT_NORM_EPS)?.batch)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    /// Row-normalized copy with the default epsilon guard.
    pub fn normalized(&self) -> Result<EmbeddingBatch> {
        normalize_batch(self, DEFAULT_NORM_EPS).map(|n| n.batch)
    }

    pub fn rows_are_unit(&self) -> bool {
        (0..self.rows()).all(|i| (self.data.row(i).norm() - 1.0).abs() <= UNIT_NORM_TOL)
    }

    /// Applies a row permutation: row `k` of the result is row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            data: DMatrix::from_fn(self.rows(), self.dim(), |i, j| self.data[(perm[i], j)]),
            normalized: self.normalized,
        }
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(DagrError::NotNormalized)
        }
    }
}

/// Aligned embeddings of `M` modalities over the same `B` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatchSet {
    pub batches: Vec<EmbeddingBatch>,
    pub labels: Vec<usize>,
    pub modality_names: Vec<String>,
}

impl ModalityBatchSet {
    pub fn new(batches: Vec<EmbeddingBatch>, labels: Vec<usize>) -> Result<Self> {
        let names = (0..batches.len()).map(|m| format!("m{m}")).collect();
        Self::with_names(batches, labels, names)
    }

    pub fn with_names(
        batches: Vec<EmbeddingBatch>,
        labels: Vec<usize>,
        modality_names: Vec<String>,
    ) -> Result<Self> {
        let first = batches.first().ok_or(DagrError::EmptyBatch { rows: 0, cols: 0 })?;
        let b = first.rows();
        for batch in &batches {
            if batch.rows() != b {
                return Err(DagrError::DimensionMismatch {
                    expected: b,
                    got: batch.rows(),
                });
            }
        }
        if labels.len() != b {
            return Err(DagrError::DimensionMismatch {
                expected: b,
                got: labels.len(),
            });
        }
        if modality_names.len() != batches.len() {
            return Err(DagrError::ShapeMismatch("one name per modality".into()));
        }
        Ok(Self {
            batches,
            labels,
            modality_names,
        })
    }

    /// Unlabelled set (all labels zero), for flow simulations.
    pub fn unlabeled(batches: Vec<EmbeddingBatch>) -> Result<Self> {
        let b = batches.first().map_or(0, |x| x.rows());
        Self::new(batches, vec![0; b])
    }

    pub fn modalities(&self) -> usize {
        self.batches.len()
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    /// Checks the anchoring preconditions: M >= 2, shared d, all normalized.
    pub fn require_anchorable(&self) -> Result<usize> {
        if self.modalities() < 2 {
            return Err(DagrError::SingleModality);
        }
        let d = self.batches[0].dim();
        for b in &self.batches {
            if b.dim() != d {
                return Err(DagrError::DimensionMismatch {
                    expected: d,
                    got: b.dim(),
                });
            }
            b.require_normalized()?;
        }
        Ok(d)
    }

    pub fn normalized(&self, eps: f64) -> Result<Self> {
        let batches = self
            .batches
            .iter()
            .map(|b| normalize_batch(b, eps).map(|n| n.batch))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            batches,
            labels: self.labels.clone(),
            modality_names: self.modality_names.clone(),
        })
    }
}

/// Result of [`normalize_batch`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub batch: EmbeddingBatch,
    /// Pre-normalization row norms.
    pub norms: Vec<f64>,
    /// Rows whose norm fell below epsilon and were divided by epsilon instead.
    pub guarded_rows: Vec<usize>,
}

/// Projects every row onto the unit sphere, dividing by `max(norm, eps)`.
pub fn normalize_batch(batch: &EmbeddingBatch, eps: f64) -> Result<Normalized> {
    if !(eps > 0.0) {
        return Err(DagrError::Range {
            key: "epsilon".into(),
            reason: "must be positive".into(),
        });
    }
    let src = batch.data();
    if src.iter().any(|v| !v.is_finite()) {
        return Err(DagrError::NonFiniteInput("normalize_batch"));
    }
    let mut out = src.clone();
    let mut norms = Vec::with_capacity(src.nrows());
    let mut guarded_rows = Vec::new();
    for i in 0..src.nrows() {
        let n = src.row(i).norm();
        norms.push(n);
        let denom = if n < eps {
            guarded_rows.push(i);
            eps
        } else {
            n
        };
        for j in 0..src.ncols() {
            out[(i, j)] /= denom;
        }
    }
    Ok(Normalized {
        batch: EmbeddingBatch {
            data: out,
            normalized: guarded_rows.is_empty(),
        },
        norms,
        guarded_rows,
    })
}

/// Symmetric matrix of squared Euclidean distances with an exact-zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub sq_dists: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sq_dists[i][j]
    }

    pub fn len(&self) -> usize {
        self.sq_dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_dists.is_empty()
    }

    /// Smallest off-diagonal Euclidean distance.
    pub fn min_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(self.sq_dists[i][j]);
            }
        }
        best.sqrt()
    }
}

/// `||a||^2 + ||b||^2 - 2<a,b>` clamped at zero.
pub fn pairwise_sq_dists(batch: &EmbeddingBatch) -> Result<DistanceMatrix> {
    let b = batch.rows();
    if b < 2 {
        return Err(DagrError::BatchTooSmall(b));
    }
    let z = batch.data();
    let gram = z * z.transpose();
    let mut sq = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in (i + 1)..b {
            let v = (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0);
            sq[i][j] = v;
            sq[j][i] = v;
        }
    }
    Ok(DistanceMatrix { sq_dists: sq })
}

/// Uncentered batch second moment `(1/B) sum_i z_i z_i^T`.
///
/// This is the batch-average estimator of `E[z z^T]`; no mean is removed.
pub fn covariance(batch: &EmbeddingBatch) -> DMatrix<f64> {
    let z = batch.data();
    let b = z.nrows() as f64;
    let mut sigma = z.transpose() * z;
    sigma /= b;
    // symmetrize away round-off
    let s = sigma.clone();
    sigma += s.transpose();
    sigma *= 0.5;
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = normalize_batch(&batch(&[vec![3.0, 4.0], vec![1.0, 0.0]]), DEFAULT_NORM_EPS).unwrap();
        assert_abs_diff_eq!(n.batch.data()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.batch.data()[(0, 1)], 0.8, epsilon = 1e-15);
        assert_eq!(n.batch.row(1), vec![1.0, 0.0]);
        assert!(n.batch.is_normalized());
        assert!(n.guarded_rows.is_empty());
    }

    #[test]
    fn normalize_zero_row_is_guarded() {
        let n = normalize_batch(&batch(&[vec![0.0, 0.0], vec![1.0, 0.0]]), 1e-12).unwrap();
        assert_eq!(n.batch.row(0), vec![0.0, 0.0]);
        assert_eq!(n.guarded_rows, vec![0]);
        assert!(!n.batch.is_normalized());
    }

    #[test]
    fn non_finite_is_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[f64::NAN, 1.0]);
        assert_eq!(
            EmbeddingBatch::new(m).unwrap_err(),
            DagrError::NonFiniteInput("embedding batch")
        );
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_sq_dists(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_abs_diff_eq!(d.get(0, 1), 2.0, epsilon = 1e-15);
        assert_eq!(d.get(0, 0), 0.0);
        let d = pairwise_sq_dists(&batch(&[vec![1.0, 0.0], vec![-1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(d.get(1, 0), 4.0, epsilon = 1e-15);
        let d = pairwise_sq_dists(&batch(&[vec![1.0, 0.0], vec![0.6, 0.8]])).unwrap();
        assert_abs_diff_eq!(d.get(0, 1), 0.8, epsilon = 1e-12);
        assert_eq!(
            pairwise_sq_dists(&batch(&[vec![1.0]])).unwrap_err(),
            DagrError::BatchTooSmall(1)
        );
    }

    #[test]
    fn covariance_examples() {
        let c = covariance(&batch(&vec![vec![1.0, 0.0, 0.0]; 5]));
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 1);
        let c = covariance(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        let c = covariance(&batch(&[vec![1.0, 0.0], vec![0.6, 0.8]]));
        let want = [0.68, 0.24, 0.24, 0.32];
        for (got, want) in c.transpose().iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    fn arb_batch() -> impl Strategy<Value = EmbeddingBatch> {
        (2usize..12, 1usize..7).prop_flat_map(|(b, d)| {
            proptest::collection::vec(-5.0f64..5.0, b * d).prop_map(move |v| {
                EmbeddingBatch::new(DMatrix::from_row_slice(b, d, &v)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(b in arb_batch()) {
            let once = normalize_batch(&b, 1e-12).unwrap();
            prop_assume!(once.guarded_rows.is_empty());
            let twice = normalize_batch(&once.batch, 1e-12).unwrap();
            for (x, y) in once.batch.data().iter().zip(twice.batch.data().iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalized_trace_is_one(b in arb_batch()) {
            let n = normalize_batch(&b, 1e-12).unwrap();
            prop_assume!(n.guarded_rows.is_empty());
            prop_assert!((covariance(&n.batch).trace() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn sq_dist_matches_inner_product(b in arb_batch()) {
            let n = normalize_batch(&b, 1e-12).unwrap();
            prop_assume!(n.guarded_rows.is_empty());
            let dm = pairwise_sq_dists(&n.batch).unwrap();
            let z = n.batch.data();
            for i in 0..z.nrows() {
                for j in 0..z.nrows() {
                    if i == j { continue; }
                    let ip = z.row(i).dot(&z.row(j));
                    prop_assert!((dm.get(i, j) - (2.0 - 2.0 * ip)).abs() <= 1e-9);
                    prop_assert!(dm.get(i, j) <= 4.0 + 1e-9);
                    prop_assert_eq!(dm.get(i, j), dm.get(j, i));
                }
            }
        }
    }
}
