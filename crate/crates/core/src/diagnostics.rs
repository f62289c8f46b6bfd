//! Geometry and separability metrics: effective rank, the Renyi-2 proxy,
//! semantic margin, cross-modal deviation and excess drift, the
//! matched/mismatched similarity gap, two-sample KS distance and Recall@K.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DagrError, Result};
use crate::geom::{covariance, normalize_batch, EmbeddingBatch, ModalityBatchSet, DEFAULT_NORM_EPS};
use crate::losses::{anchoring_loss, dispersive_loss_rbf, AnchorConfig};

/// `(tr S)^2 / tr(S^2)`.
pub fn effective_rank(sigma: &DMatrix<f64>) -> Result<f64> {
    let tr = sigma.trace();
    if !(tr.abs() > 0.0) {
        return Err(DagrError::ZeroTrace);
    }
    // tr(S^2) = ||S||_F^2 for symmetric S
    let tr_sq: f64 = sigma.iter().map(|v| v * v).sum();
    Ok(tr * tr / tr_sq)
}

/// Effective rank of a batch's second moment after normalization.
pub fn batch_effective_rank(batch: &EmbeddingBatch) -> Result<f64> {
    let n = normalize_batch(batch, DEFAULT_NORM_EPS)?;
    effective_rank(&covariance(&n.batch))
}

/// Negated RBF uniformity loss; larger means more dispersed. Equals the
/// Renyi-2 entropy only up to a kernel constant depending on `t` and `d`.
pub fn renyi2_proxy(batch: &EmbeddingBatch, t: f64) -> Result<f64> {
    Ok(-dispersive_loss_rbf(batch, t)?.value)
}

/// Mean inter-class pairwise distance minus mean intra-class pairwise
/// distance. Classes with fewer than two members contribute no intra term.
pub fn semantic_margin(batch: &EmbeddingBatch, labels: &[usize], normalize: bool) -> Result<f64> {
    if labels.len() != batch.rows() {
        return Err(DagrError::DimensionMismatch {
            expected: batch.rows(),
            got: labels.len(),
        });
    }
    let owned;
    let z = if normalize {
        owned = normalize_batch(batch, DEFAULT_NORM_EPS)?.batch;
        owned.data()
    } else {
        batch.data()
    };
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(DagrError::SingleClass);
    }
    let dist = |i: usize, j: usize| (z.row(i) - z.row(j)).norm();
    let groups: Vec<&Vec<usize>> = classes.values().collect();

    let mut intra_sum = 0.0;
    let mut intra_classes = 0usize;
    for g in &groups {
        if g.len() < 2 {
            continue;
        }
        let mut s = 0.0;
        for a in 0..g.len() {
            for b in (a + 1)..g.len() {
                s += dist(g[a], g[b]);
            }
        }
        intra_sum += s / (g.len() * (g.len() - 1) / 2) as f64;
        intra_classes += 1;
    }
    let intra = if intra_classes > 0 {
        intra_sum / intra_classes as f64
    } else {
        0.0
    };

    // mean over unordered class pairs equals the mean over ordered ones
    let mut inter_sum = 0.0;
    let mut inter_pairs = 0usize;
    for a in 0..groups.len() {
        for b in (a + 1)..groups.len() {
            let mut s = 0.0;
            for &i in groups[a] {
                for &j in groups[b] {
                    s += dist(i, j);
                }
            }
            inter_sum += s / (groups[a].len() * groups[b].len()) as f64;
            inter_pairs += 1;
        }
    }
    Ok(inter_sum / inter_pairs as f64 - intra)
}

/// Mean squared distance between matched embeddings, averaged over samples
/// and ordered modality pairs.
pub fn cross_modal_deviation(set: &ModalityBatchSet) -> Result<f64> {
    let m = set.modalities();
    if m < 2 {
        return Err(DagrError::SingleModality);
    }
    let d = set.batches[0].dim();
    if let Some(b) = set.batches.iter().find(|b| b.dim() != d) {
        return Err(DagrError::DimensionMismatch {
            expected: d,
            got: b.dim(),
        });
    }
    let mut total = 0.0;
    for p in 0..m {
        for q in (p + 1)..m {
            let diff = set.batches[p].data() - set.batches[q].data();
            total += 2.0 * diff.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total / (set.samples() * m * (m - 1)) as f64)
}

/// `E[(||z^m - z^n|| - tau)_+^2]`, the same quantity as the anchoring loss.
pub fn excess_drift(set: &ModalityBatchSet, tau: f64) -> Result<f64> {
    Ok(anchoring_loss(set, AnchorConfig::new(tau)?)?.value)
}

/// Cosine similarities of matched (`positive`) and mismatched (`negative`)
/// cross-modal pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySamples {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl SimilaritySamples {
    /// Positives are `cos(a_i, b_i)`; negatives are every `cos(a_i, b_j)`, `i != j`.
    pub fn from_pair(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Self> {
        if a.rows() != b.rows() || a.dim() != b.dim() {
            return Err(DagrError::ShapeMismatch("paired batches differ in shape".into()));
        }
        let na = normalize_batch(a, DEFAULT_NORM_EPS)?.batch;
        let nb = normalize_batch(b, DEFAULT_NORM_EPS)?.batch;
        let sims = na.data() * nb.data().transpose();
        let n = a.rows();
        let mut positive = Vec::with_capacity(n);
        let mut negative = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    positive.push(sims[(i, j)]);
                } else {
                    negative.push(sims[(i, j)]);
                }
            }
        }
        Ok(Self { positive, negative })
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            Err(DagrError::EmptySample)
        } else {
            Ok(())
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean(positive) - mean(negative)`.
pub fn similarity_gap(samples: &SimilaritySamples) -> Result<f64> {
    samples.require_nonempty()?;
    Ok(mean(&samples.positive) - mean(&samples.negative))
}

/// Two-sample KS statistic: sup over the pooled sample points of the gap
/// between the right-continuous empirical CDFs.
pub fn ks_distance(samples: &SimilaritySamples) -> Result<f64> {
    samples.require_nonempty()?;
    let mut xs = samples.positive.clone();
    let mut ys = samples.negative.clone();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    Ok(best)
}

/// Fraction of queries whose matched gallery row (same index) ranks in the
/// top `k` by cosine similarity; ties go to the lower gallery index.
pub fn recall_at_k(query: &EmbeddingBatch, gallery: &EmbeddingBatch, k: usize) -> Result<f64> {
    let b = query.rows();
    if gallery.rows() != b || gallery.dim() != query.dim() {
        return Err(DagrError::ShapeMismatch("query and gallery must align".into()));
    }
    if k == 0 || k > b {
        return Err(DagrError::KOutOfRange { k, max: b });
    }
    let q = normalize_batch(query, DEFAULT_NORM_EPS)?.batch;
    let g = normalize_batch(gallery, DEFAULT_NORM_EPS)?.batch;
    let sims = q.data() * g.data().transpose();
    let hits = (0..b)
        .filter(|&i| {
            let target = sims[(i, i)];
            let ahead = (0..b)
                .filter(|&j| j != i && (sims[(i, j)] > target || (sims[(i, j)] == target && j < i)))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Snapshot of every geometry metric for one set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub effective_rank: Vec<f64>,
    pub renyi2_proxy: Vec<f64>,
    pub delta_sem: Vec<f64>,
    pub delta_sem_fused: f64,
    pub cross_modal_deviation: f64,
    pub excess_drift: f64,
    pub delta_mu: f64,
    pub ks_distance: f64,
    /// Keyed by K as a string so the JSON object has stable string keys.
    pub recall_at_k: BTreeMap<String, f64>,
}

/// Options for [`geometry_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub tau: f64,
    pub t: f64,
    pub recall_ks: Vec<usize>,
    /// Compute the semantic margin on normalized embeddings.
    pub normalize_delta_sem: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            tau: crate::losses::DEFAULT_TAU,
            t: crate::losses::DEFAULT_T,
            recall_ks: vec![1, 5, 10],
            normalize_delta_sem: true,
        }
    }
}

impl ReportOptions {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: &str| DagrError::Range {
            key: key.into(),
            reason: reason.into(),
        };
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(err("tau", "must be finite and >= 0"));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(err("t", "must be > 0"));
        }
        if self.recall_ks.contains(&0) {
            return Err(err("recall_ks", "K must be >= 1"));
        }
        Ok(())
    }
}

/// Computes a [`GeometryReport`]. Cross-modal metrics use modalities 0 and 1
/// for similarities and retrieval, and all ordered pairs for the drifts.
/// Recall values are only reported for K up to the sample count.
pub fn geometry_report(set: &ModalityBatchSet, opts: &ReportOptions) -> Result<GeometryReport> {
    let normed = set.normalized(DEFAULT_NORM_EPS)?;
    let mut effective_rank_v = Vec::new();
    let mut renyi = Vec::new();
    let mut delta_sem = Vec::new();
    for (raw, unit) in set.batches.iter().zip(&normed.batches) {
        effective_rank_v.push(effective_rank(&covariance(unit))?);
        renyi.push(renyi2_proxy(unit, opts.t)?);
        delta_sem.push(semantic_margin(raw, &set.labels, opts.normalize_delta_sem)?);
    }
    // fused representation: concatenation of the normalized blocks
    let fused_cols: usize = normed.batches.iter().map(|b| b.dim()).sum();
    let mut fused = DMatrix::zeros(set.samples(), fused_cols);
    let mut off = 0;
    for b in &normed.batches {
        fused.view_mut((0, off), (b.rows(), b.dim())).copy_from(b.data());
        off += b.dim();
    }
    let delta_sem_fused = semantic_margin(
        &EmbeddingBatch::new(fused)?,
        &set.labels,
        opts.normalize_delta_sem,
    )?;

    let (cmd, drift, dmu, ks, recall) = if set.modalities() >= 2 {
        let sims = SimilaritySamples::from_pair(&normed.batches[0], &normed.batches[1])?;
        let mut recall = BTreeMap::new();
        for &k in &opts.recall_ks {
            if k >= 1 && k <= set.samples() {
                recall.insert(
                    k.to_string(),
                    recall_at_k(&normed.batches[0], &normed.batches[1], k)?,
                );
            }
        }
        (
            cross_modal_deviation(&normed)?,
            excess_drift(&normed, opts.tau)?,
            similarity_gap(&sims)?,
            ks_distance(&sims)?,
            recall,
        )
    } else {
        (0.0, 0.0, 0.0, 0.0, BTreeMap::new())
    };
    Ok(GeometryReport {
        effective_rank: effective_rank_v,
        renyi2_proxy: renyi,
        delta_sem,
        delta_sem_fused,
        cross_modal_deviation: cmd,
        excess_drift: drift,
        delta_mu: dmu,
        ks_distance: ks,
        recall_at_k: recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows).unwrap()
    }

    fn unit(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::new_normalized(b(rows).into_data()).unwrap()
    }

    fn samples(p: &[f64], n: &[f64]) -> SimilaritySamples {
        SimilaritySamples {
            positive: p.to_vec(),
            negative: n.to_vec(),
        }
    }

    #[test]
    fn effective_rank_examples() {
        assert_abs_diff_eq!(
            effective_rank(&(DMatrix::identity(5, 5) / 5.0)).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        let v = nalgebra::DVector::from_vec(vec![0.6, 0.8, 0.0]);
        assert_abs_diff_eq!(effective_rank(&(&v * v.transpose())).unwrap(), 1.0, epsilon = 1e-12);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.5, 0.0]));
        assert_eq!(effective_rank(&s).unwrap(), 2.0);
        assert_eq!(effective_rank(&DMatrix::zeros(3, 3)).unwrap_err(), DagrError::ZeroTrace);
    }

    #[test]
    fn renyi_examples() {
        assert_eq!(renyi2_proxy(&unit(&[vec![0.0, 1.0], vec![0.0, 1.0]]), 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            renyi2_proxy(&unit(&[vec![1.0, 0.0], vec![-1.0, 0.0]]), 1.0).unwrap(),
            4.0,
            epsilon = 1e-14
        );
        let mut rng = SplitMix64::new(0);
        let r = EmbeddingBatch::random_unit(9, 4, &mut rng).unwrap();
        assert_eq!(
            renyi2_proxy(&r, 2.0).unwrap(),
            -dispersive_loss_rbf(&r, 2.0).unwrap().value
        );
    }

    #[test]
    fn semantic_margin_examples() {
        let z = b(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        assert_abs_diff_eq!(
            semantic_margin(&z, &[0, 0, 1, 1], true).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        let same = b(&vec![vec![0.3, 0.4]; 4]);
        assert_eq!(semantic_margin(&same, &[0, 1, 0, 1], false).unwrap(), 0.0);
        assert_eq!(
            semantic_margin(&same, &[2, 2, 2, 2], false).unwrap_err(),
            DagrError::SingleClass
        );
        // singleton classes only contribute to the inter term
        let z = b(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(
            semantic_margin(&z, &[0, 1], false).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn cross_modal_examples() {
        let a = unit(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let same = ModalityBatchSet::unlabeled(vec![a.clone(), a.clone()]).unwrap();
        assert_eq!(cross_modal_deviation(&same).unwrap(), 0.0);
        let e1 = unit(&[vec![1.0, 0.0, 0.0]]);
        let e2 = unit(&[vec![0.0, 1.0, 0.0]]);
        let e3 = unit(&[vec![0.0, 0.0, 1.0]]);
        let pair = ModalityBatchSet::unlabeled(vec![e1.clone(), e2.clone()]).unwrap();
        assert_eq!(cross_modal_deviation(&pair).unwrap(), 2.0);
        let tri = ModalityBatchSet::unlabeled(vec![e1, e2, e3]).unwrap();
        assert_abs_diff_eq!(cross_modal_deviation(&tri).unwrap(), 2.0, epsilon = 1e-15);
        let single = ModalityBatchSet::unlabeled(vec![a]).unwrap();
        assert_eq!(cross_modal_deviation(&single).unwrap_err(), DagrError::SingleModality);
    }

    #[test]
    fn excess_drift_examples() {
        let pair = ModalityBatchSet::unlabeled(vec![
            unit(&[vec![1.0, 0.0]]),
            unit(&[vec![0.0, 1.0]]),
        ])
        .unwrap();
        assert_eq!(excess_drift(&pair, 1.5).unwrap(), 0.0);
        assert_abs_diff_eq!(excess_drift(&pair, 0.5).unwrap(), 0.835_786_437_626_904_9, epsilon = 1e-12);
        let mut rng = SplitMix64::new(5);
        let set = ModalityBatchSet::unlabeled(vec![
            EmbeddingBatch::random_unit(7, 3, &mut rng).unwrap(),
            EmbeddingBatch::random_unit(7, 3, &mut rng).unwrap(),
            EmbeddingBatch::random_unit(7, 3, &mut rng).unwrap(),
        ])
        .unwrap();
        assert_abs_diff_eq!(
            excess_drift(&set, 0.0).unwrap(),
            cross_modal_deviation(&set).unwrap(),
            epsilon = 1e-12
        );
        assert_eq!(
            excess_drift(&set, 0.3).unwrap(),
            anchoring_loss(&set, AnchorConfig { tau: 0.3 }).unwrap().value
        );
    }

    #[test]
    fn similarity_gap_examples() {
        assert_eq!(similarity_gap(&samples(&[0.1, 0.5], &[0.1, 0.5])).unwrap(), 0.0);
        assert_eq!(similarity_gap(&samples(&[1.0, 1.0], &[-1.0])).unwrap(), 2.0);
        assert_abs_diff_eq!(
            similarity_gap(&samples(&[0.2, 0.4], &[0.1])).unwrap(),
            0.2,
            epsilon = 1e-15
        );
        assert_eq!(similarity_gap(&samples(&[], &[0.1])).unwrap_err(), DagrError::EmptySample);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_distance(&samples(&[0.3, 0.1, 0.3], &[0.1, 0.3, 0.3])).unwrap(), 0.0);
        assert_eq!(ks_distance(&samples(&[0.0, 0.0], &[1.0, 1.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(
            ks_distance(&samples(&[0.1, 0.3, 0.5], &[0.2, 0.4])).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(ks_distance(&samples(&[0.1], &[])).unwrap_err(), DagrError::EmptySample);
    }

    #[test]
    fn recall_examples() {
        let q = unit(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(recall_at_k(&q, &q, 1).unwrap(), 1.0);
        let swapped = q.permuted(&[1, 0, 2]);
        assert_abs_diff_eq!(recall_at_k(&q, &swapped, 1).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(recall_at_k(&q, &swapped, 3).unwrap(), 1.0);
        assert_eq!(
            recall_at_k(&q, &q, 4).unwrap_err(),
            DagrError::KOutOfRange { k: 4, max: 3 }
        );
        assert!(recall_at_k(&q, &q, 0).is_err());
    }

    #[test]
    fn report_on_identical_modalities() {
        let mut rng = SplitMix64::new(9);
        let a = EmbeddingBatch::random_unit(12, 4, &mut rng).unwrap();
        let labels = (0..12).map(|i| i % 3).collect();
        let set = ModalityBatchSet::new(vec![a.clone(), a], labels).unwrap();
        let r = geometry_report(&set, &ReportOptions::default()).unwrap();
        assert_eq!(r.cross_modal_deviation, 0.0);
        assert_eq!(r.excess_drift, 0.0);
        assert_eq!(r.recall_at_k["1"], 1.0);
        assert!(r.delta_mu > 0.0);
        assert_eq!(r.effective_rank[0], r.effective_rank[1]);
        assert!(!r.recall_at_k.contains_key("15"));
    }

    fn rotation(d: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        a.qr().q()
    }

    proptest! {
        #[test]
        fn ks_symmetric_and_monotone_invariant(
            p in proptest::collection::vec(-1.0f64..1.0, 1..20),
            n in proptest::collection::vec(-1.0f64..1.0, 1..20),
        ) {
            let a = ks_distance(&samples(&p, &n)).unwrap();
            let b = ks_distance(&samples(&n, &p)).unwrap();
            prop_assert_eq!(a, b);
            let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() + x).collect::<Vec<_>>();
            let c = ks_distance(&samples(&f(&p), &f(&n))).unwrap();
            prop_assert_eq!(a, c);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn recall_monotone_in_k(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let q = EmbeddingBatch::random_unit(8, 3, &mut rng).unwrap();
            let g = EmbeddingBatch::random_unit(8, 3, &mut rng).unwrap();
            let mut prev = 0.0;
            for k in 1..=8 {
                let r = recall_at_k(&q, &g, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn rank_and_margin_rotation_invariant(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let z = EmbeddingBatch::random_unit(10, 4, &mut rng).unwrap();
            let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
            let r = rotation(4, &mut rng);
            let zr = EmbeddingBatch::new(z.data() * r.transpose()).unwrap();
            let s = covariance(&z);
            let er = effective_rank(&s).unwrap();
            prop_assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&er));
            let conj = &r * &s * r.transpose();
            prop_assert!((effective_rank(&conj).unwrap() - er).abs() <= 1e-9);
            let m0 = semantic_margin(&z, &labels, false).unwrap();
            let m1 = semantic_margin(&zr, &labels, false).unwrap();
            prop_assert!((m0 - m1).abs() <= 1e-9);
        }
    }
}
