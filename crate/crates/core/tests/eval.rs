use das_core::eval::{
    auc, codebook_stats, grouped_auc, perplexity, report_from_counts, retrieval_eval, GroupWeighting, RetrievalOptions,
};
use das_core::{DasError, SemanticId};
use das_numerics::{SeededRng, Tensor};
use proptest::prelude::*;

/// O(n²) pair counting with ties worth one half.
fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn scored_labels(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max).prop_flat_map(|n| {
        // few distinct values so ties are common
        let scores = prop::collection::vec((0i32..12).prop_map(|v| v as f64 / 4.0), n);
        let labels = prop::collection::vec(any::<bool>(), n).prop_map(|mut l| {
            l[0] = true;
            l[1] = false;
            l
        });
        (scores, labels)
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_labels(60)) {
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn single_group_equals_plain_auc((scores, labels) in scored_labels(40)) {
        let groups = vec![0u8; scores.len()];
        let plain = auc(&scores, &labels).unwrap();
        for w in [GroupWeighting::Uniform, GroupWeighting::Impressions] {
            // (n·a)/n may round one ulp away from a
            prop_assert!((grouped_auc(&scores, &labels, &groups, w).unwrap() - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn perplexity_is_bounded_by_used_codes(counts in prop::collection::vec(0usize..20, 1..64)) {
        let used = counts.iter().filter(|&&c| c > 0).count();
        let p = perplexity(&counts);
        prop_assume!(used > 0);
        prop_assert!(p >= 1.0 - 1e-12 && p <= used as f64 + 1e-9);
        let nz: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        let uniform = nz.iter().all(|&c| c == nz[0]);
        prop_assert_eq!(uniform, (p - used as f64).abs() < 1e-9);
        let r = report_from_counts(1, &counts);
        prop_assert!((r.group_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(r.usage_rate, used as f64 / counts.len() as f64);
    }
}

#[test]
fn large_inputs_match_pair_counting() {
    let mut rng = SeededRng::new(0);
    let scores: Vec<f64> = (0..1000).map(|_| (rng.below(50)) as f64).collect();
    let labels: Vec<bool> = (0..1000).map(|_| rng.uniform() < 0.2).collect();
    assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
}

#[test]
fn auc_rejects_bad_input() {
    assert!(matches!(auc(&[0.1], &[true, false]), Err(DasError::Invalid(_))));
    assert!(matches!(auc(&[f64::NAN, 0.0], &[true, false]), Err(DasError::Invalid(_))));
    assert!(matches!(auc(&[0.1, 0.2], &[false, false]), Err(DasError::DegenerateLabels(_))));
}

#[test]
fn uniform_assignment_has_perplexity_n() {
    let n = 512;
    let sids: Vec<SemanticId> = (0..n * 3).map(|i| SemanticId(vec![i % n, 0])).collect();
    let r = codebook_stats(&sids, 1, n).unwrap();
    assert!((r.perplexity - n as f64).abs() < 1e-6);
    assert_eq!(r.usage_rate, 1.0);
    assert!(r.group_mass.iter().all(|&m| (m - 0.1).abs() < 0.01));
    let second = codebook_stats(&sids, 2, n).unwrap();
    assert_eq!(second.perplexity, 1.0);
    assert!(codebook_stats(&sids, 3, n).is_err());
    assert!(codebook_stats(&[], 1, n).is_err());
    assert!(codebook_stats(&[SemanticId(vec![n])], 1, n).is_err());
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// With random embeddings and one held-out positive per query, a hit is a
/// Bernoulli(K/pool) draw, so recall@K should sit within 3σ of K/pool.
#[test]
fn random_scores_recall_k_over_pool() {
    let (pool, queries, k) = (1000, 2000, 100);
    let p = k as f64 / pool as f64;
    let sigma = (p * (1.0 - p) / queries as f64).sqrt();
    for seed in 0..3 {
        let mut rng = SeededRng::new(seed);
        let q = random_matrix(queries, 8, &mut rng);
        let c = random_matrix(pool, 8, &mut rng);
        let held: Vec<(usize, usize)> = (0..queries).map(|u| (u, rng.below(pool))).collect();
        let r = retrieval_eval(&q, &c, &held, &[], RetrievalOptions { k, negatives: Some(99), seed }).unwrap();
        assert!((r.recall_at_k - p).abs() <= 3.0 * sigma, "seed {seed}: recall {}", r.recall_at_k);
        assert!((r.auc - 0.5).abs() <= 3.0 * (1.0 / 12.0 / queries as f64).sqrt() * 2.0, "seed {seed}: auc {}", r.auc);
        assert_eq!((r.queries, r.positives, r.pool), (queries, queries, pool));
    }
}

#[test]
fn training_pairs_are_filtered_from_the_ranking() {
    let q = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let c = Tensor::matrix(4, 1, vec![4.0, 3.0, 2.0, 1.0]).unwrap();
    let opts = RetrievalOptions { k: 1, negatives: None, seed: 0 };
    // candidate 2 competes with 0 and 1 (and 3)
    let plain = retrieval_eval(&q, &c, &[(0, 2)], &[], opts).unwrap();
    assert_eq!(plain.recall_at_k, 0.0);
    assert!((plain.auc - 1.0 / 3.0).abs() < 1e-12);
    // once 0 and 1 are training clicks, 2 ranks first among the rest
    let filtered = retrieval_eval(&q, &c, &[(0, 2)], &[(0, 0), (0, 1)], opts).unwrap();
    assert_eq!(filtered.recall_at_k, 1.0);
    assert_eq!(filtered.auc, 1.0);
    // other held-out positives do not count against each other
    let both = retrieval_eval(&q, &c, &[(0, 2), (0, 0)], &[], opts).unwrap();
    assert_eq!(both.recall_at_k, 0.5);
    // a held-out pair that was also trained on is not scored
    assert!(retrieval_eval(&q, &c, &[(0, 1)], &[(0, 1)], opts).is_err());
}

#[test]
fn full_pool_auc_equals_pair_counting() {
    let mut rng = SeededRng::new(4);
    let q = random_matrix(1, 4, &mut rng);
    let c = random_matrix(50, 4, &mut rng);
    let positives = [3, 17, 40];
    let held: Vec<(usize, usize)> = positives.iter().map(|&i| (0, i)).collect();
    let r = retrieval_eval(&q, &c, &held, &[], RetrievalOptions { k: 10, negatives: None, seed: 0 }).unwrap();
    let scores: Vec<f64> = (0..50).map(|i| das_numerics::dot(q.row(0), c.row(i))).collect();
    let labels: Vec<bool> = (0..50).map(|i| positives.contains(&i)).collect();
    assert!((r.auc - brute_auc(&scores, &labels)).abs() < 1e-12);
}

#[test]
fn constant_scores_earn_no_recall() {
    let q = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let c = Tensor::matrix(10, 1, vec![1.0; 10]).unwrap();
    let r = retrieval_eval(&q, &c, &[(0, 4)], &[], RetrievalOptions { k: 5, negatives: None, seed: 0 }).unwrap();
    assert_eq!(r.recall_at_k, 0.0);
    assert_eq!(r.auc, 0.5);
}

#[test]
fn retrieval_rejects_bad_input() {
    let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let c = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let opts = RetrievalOptions::default();
    assert!(retrieval_eval(&q, &Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), &[(0, 0)], &[], opts).is_err());
    assert!(retrieval_eval(&q, &c, &[(0, 5)], &[], opts).is_err());
    assert!(retrieval_eval(&q, &c, &[(0, 0)], &[], RetrievalOptions { k: 0, ..opts }).is_err());
    assert!(retrieval_eval(&q, &c, &[], &[], opts).is_err());
}

#[test]
fn sampled_negatives_are_seeded() {
    let mut rng = SeededRng::new(5);
    let q = random_matrix(30, 4, &mut rng);
    let c = random_matrix(300, 4, &mut rng);
    let held: Vec<(usize, usize)> = (0..30).map(|u| (u, rng.below(300))).collect();
    let opts = RetrievalOptions { k: 10, negatives: Some(20), seed: 1 };
    let a = retrieval_eval(&q, &c, &held, &[], opts).unwrap();
    assert_eq!(a, retrieval_eval(&q, &c, &held, &[], opts).unwrap());
    assert_ne!(a.auc, retrieval_eval(&q, &c, &held, &[], RetrievalOptions { seed: 2, ..opts }).unwrap().auc);
}
