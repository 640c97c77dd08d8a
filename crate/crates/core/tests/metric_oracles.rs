mod support;

use kep_core::evaluation::{
    balanced_accuracy, recall_at_k, topk_pool_slide, weighted_f1, zero_shot_classify, Pooling,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

const INSTANCES: u64 = 250;

#[test]
fn weighted_f1_matches_confusion_matrix_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..6);
        let labels = oracles::random_labels(&mut rng, n, c);
        let preds = oracles::random_labels(&mut rng, n, c);
        let diff = (weighted_f1(&preds, &labels) - oracles::weighted_f1(&preds, &labels)).abs();
        assert!(diff <= 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn balanced_accuracy_matches_confusion_matrix_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..6);
        let labels = oracles::random_labels(&mut rng, n, c);
        let preds = oracles::random_labels(&mut rng, n, c);
        let diff = (balanced_accuracy(&preds, &labels) - oracles::balanced_accuracy(&preds, &labels)).abs();
        assert!(diff <= 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn zero_shot_matches_exhaustive_argmax() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = oracles::coarse_tensor(&mut rng, 10, 4);
        let prompts = oracles::coarse_tensor(&mut rng, 3, 4);
        assert_eq!(
            zero_shot_classify(&images, &prompts),
            oracles::zero_shot(&images, &prompts),
            "seed {seed}"
        );
    }
}

#[test]
fn recall_matches_rank_counting_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rng.random_range(2..15);
        let query = oracles::coarse_tensor(&mut rng, 20, 3);
        let gallery = oracles::coarse_tensor(&mut rng, g, 3);
        let positives: Vec<Vec<usize>> = (0..20)
            .map(|_| {
                let m = rng.random_range(1..=3.min(g));
                rand::seq::index::sample(&mut rng, g, m).into_vec()
            })
            .collect();
        let k = rng.random_range(1..=g);
        let got = recall_at_k(&query, &gallery, &positives, k);
        let want = oracles::recall_at_k(&query, &gallery, &positives, k);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn topk_pooling_matches_full_sort_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(1..12);
        let scores = oracles::coarse_tensor(&mut rng, p, 4);
        for k in [1, 2, 5, 50] {
            assert_eq!(
                topk_pool_slide(&scores, k, Pooling::Mean),
                oracles::topk_mean_pool(&scores, k),
                "seed {seed}, k {k}"
            );
        }
    }
}
