use distillrec_autodiff::Tensor;
use distillrec_core::data::{build_sequences, chronological_split, sample_negatives, InteractionDataset};
use distillrec_core::distill::{
    combine_weights, confidence_weight, importance_weights, position_weight, DistillConfig,
};
use distillrec_core::eval::{hr_at_k, ndcg_at_k, overlap_ratio};
use distillrec_core::student::top_k;
use distillrec_core::teacher::{grounding_distance, rank_by_grounding};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn full_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn dataset_strategy() -> impl Strategy<Value = Vec<(u64, u64, i64)>> {
    prop::collection::vec((0u64..8, 0u64..15, 0i64..40), 12..120)
}

/// Orthogonal matrix built from Givens rotations.
fn rotation(dim: usize, angles: &[f64]) -> Tensor {
    let mut q = Tensor::eye(dim);
    for (n, &a) in angles.iter().enumerate() {
        let (i, j) = (n % dim, (n + 1) % dim);
        let mut g = Tensor::eye(dim);
        let (c, s) = (a.cos(), a.sin());
        g.row_mut(i)[i] = c;
        g.row_mut(i)[j] = -s;
        g.row_mut(j)[i] = s;
        g.row_mut(j)[j] = c;
        q = q.matmul(&g).unwrap();
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negatives_avoid_target(target in 0usize..20, n in 1usize..50, seed in any::<u64>()) {
        let neg = sample_negatives(target, 20, n, seed).unwrap();
        prop_assert_eq!(neg.len(), n);
        prop_assert!(neg.iter().all(|&j| j != target && j < 20));
        prop_assert_eq!(neg, sample_negatives(target, 20, n, seed).unwrap());
    }

    #[test]
    fn sequences_cover_each_history(rows in dataset_strategy(), max_len in 1usize..6) {
        let ds = InteractionDataset::from_raw(&rows);
        let samples = build_sequences(&ds, max_len).unwrap();
        for u in 0..ds.user_count() {
            let events = ds.interactions.iter().filter(|e| e.user == u).count();
            let count = samples.iter().filter(|s| s.user == u).count();
            prop_assert_eq!(count, events - 1);
        }
        for (i, s) in samples.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert!(!s.prefix.is_empty() && s.prefix.len() <= max_len);
        }
    }

    #[test]
    fn split_is_chronological(rows in dataset_strategy(), a in 1u32..10, b in 0u32..4, c in 0u32..4) {
        let ds = InteractionDataset::from_raw(&rows);
        let samples = build_sequences(&ds, 5).unwrap();
        prop_assume!(samples.len() >= 10);
        let n = samples.len();
        let split = chronological_split(samples, [a, b, c], ds.item_count(), ds.user_count()).unwrap();
        let total = (a + b + c) as usize;
        prop_assert_eq!(split.train.len(), n * a as usize / total);
        prop_assert_eq!(split.train.len() + split.validation.len(), n * (a + b) as usize / total);
        prop_assert_eq!(split.train.len() + split.validation.len() + split.test.len(), n);
        let max_train = split.train.iter().map(|s| s.target_timestamp).max().unwrap_or(i64::MIN);
        for s in split.validation.iter().chain(&split.test) {
            prop_assert!(s.target_timestamp >= max_train);
        }
        let max_val = split.validation.iter().map(|s| s.target_timestamp).max().unwrap_or(i64::MIN);
        for s in &split.test {
            prop_assert!(s.target_timestamp >= max_val);
        }
    }

    #[test]
    fn top_k_matches_full_sort(scores in prop::collection::vec(-3i32..3, 1..60), k in 0usize..70) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        prop_assert_eq!(top_k(&scores, k), full_sort(&scores, k));
    }

    #[test]
    fn top_k_invariant_to_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 1..60), k in 1usize..30, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(top_k(&scores, k), top_k(&mapped, k));
        prop_assert_eq!(top_k(&scores, k), top_k(&cubed, k));
    }

    #[test]
    fn ndcg_bounded_by_hit(list in prop::collection::vec(0usize..30, 0..20), target in 0usize..30) {
        let hr = hr_at_k(&list, target);
        let nd = ndcg_at_k(&list, target);
        prop_assert!((0.0..=1.0).contains(&nd));
        prop_assert!(nd <= hr);
        prop_assert_eq!(hr == 1.0, nd > 0.0);
    }

    #[test]
    fn overlap_is_symmetric(
        a in prop::collection::vec(prop::sample::subsequence((0usize..40).collect::<Vec<_>>(), 10), 1..8),
        b in prop::collection::vec(prop::sample::subsequence((0usize..40).collect::<Vec<_>>(), 10), 1..8),
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let ab = overlap_ratio(a, b, 10, None).unwrap().overlap;
        let ba = overlap_ratio(b, a, 10, None).unwrap().overlap;
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(overlap_ratio(a, a, 10, None).unwrap().overlap, 1.0);
    }

    #[test]
    fn weights_are_bounded(
        ranking in prop::sample::subsequence((0usize..50).collect::<Vec<_>>(), 20).prop_shuffle(),
        student in prop::sample::subsequence((0usize..50).collect::<Vec<_>>(), 10),
        distance in 0.0f64..20.0,
        beta in 0.05f64..20.0,
        gp in 0.0f64..1.0, gc in 0.0f64..1.0, go in 0.0f64..1.0,
    ) {
        let cfg = DistillConfig { beta, gamma_p: gp, gamma_c: gc, gamma_o: go, ..DistillConfig::default() };
        let w = importance_weights(&ranking, distance, &student, &cfg).unwrap();
        prop_assert_eq!(w.items.len(), cfg.k);
        for (r, &x) in w.combined.iter().enumerate() {
            prop_assert!(x >= 0.0 && x <= gp + gc + go + 1e-15);
            prop_assert_eq!(x, combine_weights(w.position[r], w.confidence, w.consistency[r], gp, gc, go));
        }
        prop_assert!(w.position.windows(2).all(|p| p[0] > p[1]));
        prop_assert!(w.confidence <= 1.0 && w.confidence > 0.0 || distance / beta > 700.0);
        prop_assert_eq!(w.confidence, confidence_weight(distance, beta).unwrap());
        prop_assert_eq!(w.position[0], position_weight(1, beta).unwrap());
    }

    #[test]
    fn grounding_is_rotation_invariant(
        table in prop::collection::vec(-2.0f64..2.0, 8 * 4),
        probe in prop::collection::vec(-2.0f64..2.0, 4),
        angles in prop::collection::vec(0.0f64..6.28, 1..6),
    ) {
        let z = Tensor::matrix(8, 4, table).unwrap();
        let q = rotation(4, &angles);
        let zr = z.matmul(&q).unwrap();
        let pr = Tensor::matrix(1, 4, probe.clone()).unwrap().matmul(&q).unwrap();
        let before = rank_by_grounding(&probe, &z, 8).unwrap();
        let after = rank_by_grounding(pr.row(0), &zr, 8).unwrap();
        // Rotation preserves distances up to rounding; compare by distance.
        for (x, y) in before.iter().zip(&after) {
            let dx = grounding_distance(&probe, z.row(*x)).unwrap();
            let dy = grounding_distance(&probe, z.row(*y)).unwrap();
            prop_assert!((dx - dy).abs() < 1e-9);
        }
        for i in 0..8 {
            let d0 = grounding_distance(&probe, z.row(i)).unwrap();
            let d1 = grounding_distance(pr.row(0), zr.row(i)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9 * (1.0 + d0));
            let c = |d| confidence_weight(d, 1.0).unwrap();
            prop_assert!((c(d0) - c(d1)).abs() < 1e-9);
        }
    }
}

#[test]
fn negatives_are_uniform() {
    // 10 items, target 3: the other 9 should be equally likely.
    let mut counts = [0usize; 10];
    for seed in 0..2000u64 {
        for j in sample_negatives(3, 10, 9, seed).unwrap() {
            counts[j] += 1;
        }
    }
    assert_eq!(counts[3], 0);
    let observed: Vec<f64> = counts.iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, &c)| c as f64).collect();
    let expected = observed.iter().sum::<f64>() / 9.0;
    let chi2: f64 = observed.iter().map(|o| (o - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
}
