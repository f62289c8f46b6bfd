use approx::assert_abs_diff_eq;
use dagr_core::diagnostics::{
    batch_effective_rank, cross_modal_deviation, effective_rank, excess_drift, ks_distance, recall_at_k, renyi2_proxy,
    semantic_margin, similarity_gap, SimilaritySamples,
};
use dagr_core::geom::{EmbeddingBatch, ModalityBatchSet};
use dagr_core::rng::SplitMix64;
use dagr_core::DagrError;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
    EmbeddingBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn unit(rows: &[&[f64]]) -> EmbeddingBatch {
    batch(rows).normalized().unwrap()
}

fn samples(p: &[f64], n: &[f64]) -> SimilaritySamples {
    SimilaritySamples {
        positive: p.to_vec(),
        negative: n.to_vec(),
    }
}

fn random_orthogonal(d: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.normal()).qr().q()
}

fn rotate(b: &EmbeddingBatch, q: &DMatrix<f64>) -> EmbeddingBatch {
    EmbeddingBatch::new(b.data() * q).unwrap()
}

#[test]
fn effective_rank_examples() {
    for d in 1..6 {
        let s = DMatrix::<f64>::identity(d, d) / d as f64;
        assert_abs_diff_eq!(effective_rank(&s).unwrap(), d as f64, epsilon = 1e-12);
    }
    let u = nalgebra::DVector::from_vec(vec![0.6, 0.8, 0.0]);
    assert_abs_diff_eq!(effective_rank(&(&u * u.transpose())).unwrap(), 1.0, epsilon = 1e-12);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.5, 0.0]));
    assert_abs_diff_eq!(effective_rank(&s).unwrap(), 2.0, epsilon = 1e-12);
    assert!(matches!(effective_rank(&DMatrix::zeros(3, 3)), Err(DagrError::ZeroTrace)));
}

#[test]
fn renyi_examples() {
    let same = unit(&[&[1.0, 0.0], &[1.0, 0.0]]);
    assert_abs_diff_eq!(renyi2_proxy(&same, 2.0).unwrap(), 0.0, epsilon = 1e-12);
    let opposite = unit(&[&[0.0, 1.0], &[0.0, -1.0]]);
    assert_abs_diff_eq!(renyi2_proxy(&opposite, 1.0).unwrap(), 4.0, epsilon = 1e-12);
}

#[test]
fn semantic_margin_examples() {
    let b = batch(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
    let labels = [0, 0, 1, 1];
    assert_abs_diff_eq!(semantic_margin(&b, &labels, true).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
    let flat = batch(&[&[0.3, 0.4] as &[f64]; 4]);
    assert_abs_diff_eq!(semantic_margin(&flat, &labels, false).unwrap(), 0.0, epsilon = 1e-15);
    let perm = [2, 0, 3, 1];
    let permuted_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    assert_abs_diff_eq!(
        semantic_margin(&b.permuted(&perm), &permuted_labels, true).unwrap(),
        2f64.sqrt(),
        epsilon = 1e-12
    );
    assert!(matches!(semantic_margin(&b, &[0, 0, 0, 0], true), Err(DagrError::SingleClass)));
    assert!(matches!(
        semantic_margin(&b, &[0, 1], true),
        Err(DagrError::DimensionMismatch { .. })
    ));
}

#[test]
fn cross_modal_examples() {
    let e1 = batch(&[&[1.0, 0.0, 0.0]]);
    let e2 = batch(&[&[0.0, 1.0, 0.0]]);
    let e3 = batch(&[&[0.0, 0.0, 1.0]]);
    let same = ModalityBatchSet::unlabeled(vec![e1.clone(), e1.clone()]).unwrap();
    assert_eq!(cross_modal_deviation(&same).unwrap(), 0.0);
    let two = ModalityBatchSet::unlabeled(vec![e1.clone(), e2.clone()]).unwrap();
    assert_abs_diff_eq!(cross_modal_deviation(&two).unwrap(), 2.0, epsilon = 1e-15);
    let three = ModalityBatchSet::unlabeled(vec![e1.clone(), e2, e3]).unwrap();
    assert_abs_diff_eq!(cross_modal_deviation(&three).unwrap(), 2.0, epsilon = 1e-15);
    let single = ModalityBatchSet::unlabeled(vec![e1]).unwrap();
    assert!(matches!(cross_modal_deviation(&single), Err(DagrError::SingleModality)));
}

#[test]
fn excess_drift_examples() {
    let two = ModalityBatchSet::unlabeled(vec![unit(&[&[1.0, 0.0]]), unit(&[&[0.0, 1.0]])]).unwrap();
    let expect = (2f64.sqrt() - 0.5).powi(2);
    assert_abs_diff_eq!(excess_drift(&two, 0.5).unwrap(), expect, epsilon = 1e-12);
    assert_abs_diff_eq!(expect, 0.8357864, epsilon = 1e-7);
    assert_eq!(excess_drift(&two, 1.5).unwrap(), 0.0);
}

#[test]
fn similarity_examples() {
    assert_eq!(similarity_gap(&samples(&[0.3, 0.3], &[0.3])).unwrap(), 0.0);
    assert_abs_diff_eq!(similarity_gap(&samples(&[1.0], &[-1.0])).unwrap(), 2.0);
    assert_abs_diff_eq!(
        similarity_gap(&samples(&[0.2, 0.4], &[0.1])).unwrap(),
        0.2,
        epsilon = 1e-15
    );
    assert!(matches!(similarity_gap(&samples(&[], &[0.1])), Err(DagrError::EmptySample)));

    assert_eq!(ks_distance(&samples(&[0.1, 0.5], &[0.5, 0.1])).unwrap(), 0.0);
    assert_eq!(ks_distance(&samples(&[0.0, 0.0], &[1.0, 1.0])).unwrap(), 1.0);
    assert_abs_diff_eq!(
        ks_distance(&samples(&[0.1, 0.3, 0.5], &[0.2, 0.4])).unwrap(),
        1.0 / 3.0,
        epsilon = 1e-15
    );

    let a = batch(&[&[1.0, 0.0], &[0.0, 2.0]]);
    let s = SimilaritySamples::from_pair(&a, &a).unwrap();
    assert_eq!(s.positive.len(), 2);
    assert_eq!(s.negative.len(), 2);
    assert!(s.positive.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert!(s.negative.iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn recall_examples() {
    let mut rng = SplitMix64::new(3);
    let q = EmbeddingBatch::random_unit(6, 4, &mut rng).unwrap();
    assert_eq!(recall_at_k(&q, &q, 1).unwrap(), 1.0);
    assert_eq!(recall_at_k(&q, &q, 6).unwrap(), 1.0);
    let eye = batch(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let swapped = eye.permuted(&[1, 0, 2]);
    assert_abs_diff_eq!(recall_at_k(&eye, &swapped, 1).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    assert!(matches!(recall_at_k(&q, &q, 0), Err(DagrError::KOutOfRange { k: 0, max: 6 })));
    assert!(matches!(recall_at_k(&q, &q, 7), Err(DagrError::KOutOfRange { k: 7, max: 6 })));
}

fn arb_batch(max_rows: usize) -> impl Strategy<Value = EmbeddingBatch> {
    (2..=max_rows, 2usize..6, any::<u64>()).prop_map(|(b, d, seed)| {
        let mut rng = SplitMix64::new(seed);
        EmbeddingBatch::new(DMatrix::from_fn(b, d, |_, _| rng.normal())).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_rank_bounded_and_rotation_invariant(b in arb_batch(12), seed in any::<u64>()) {
        let r = batch_effective_rank(&b).unwrap();
        prop_assert!(r >= 1.0 - 1e-12 && r <= b.dim() as f64 + 1e-12);
        let q = random_orthogonal(b.dim(), &mut SplitMix64::new(seed));
        let rr = batch_effective_rank(&rotate(&b, &q)).unwrap();
        prop_assert!((r - rr).abs() <= 1e-9);
    }

    #[test]
    fn ks_symmetric_and_monotone_invariant(
        p in prop::collection::vec(-1.0f64..1.0, 1..20),
        n in prop::collection::vec(-1.0f64..1.0, 1..20),
    ) {
        let k = ks_distance(&samples(&p, &n)).unwrap();
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert_eq!(k, ks_distance(&samples(&n, &p)).unwrap());
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() + x).collect::<Vec<_>>();
        prop_assert_eq!(k, ks_distance(&samples(&f(&p), &f(&n))).unwrap());
    }

    #[test]
    fn recall_grows_with_k(q in arb_batch(10), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let g = EmbeddingBatch::new(q.data().map(|v| v + 0.5 * rng.normal())).unwrap();
        let mut prev = 0.0;
        for k in 1..=q.rows() {
            let r = recall_at_k(&q, &g, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn semantic_margin_rotation_invariant(b in arb_batch(12), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..b.rows()).map(|i| i % 2).collect();
        let q = random_orthogonal(b.dim(), &mut SplitMix64::new(seed));
        for normalize in [false, true] {
            let m = semantic_margin(&b, &labels, normalize).unwrap();
            let mr = semantic_margin(&rotate(&b, &q), &labels, normalize).unwrap();
            prop_assert!((m - mr).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_tau_drift_is_mean_square(a in arb_batch(8), seed in any::<u64>()) {
        let a = a.normalized().unwrap();
        let b = EmbeddingBatch::random_unit(a.rows(), a.dim(), &mut SplitMix64::new(seed)).unwrap();
        let set = ModalityBatchSet::unlabeled(vec![a, b]).unwrap();
        let drift = excess_drift(&set, 0.0).unwrap();
        let dev = cross_modal_deviation(&set).unwrap();
        prop_assert!((drift - dev).abs() <= 1e-12 * (1.0 + dev));
    }
}
