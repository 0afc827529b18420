mod common;

use caupsi::domain::{fit_domain_labels, kmeans, pairwise_distances, silhouette};
use common::blobs;

/// True when `labels` is a relabelling of `truth`.
fn same_partition(labels: &[usize], truth: &[usize]) -> bool {
    let mut map = std::collections::HashMap::new();
    let mut inverse = std::collections::HashMap::new();
    labels.iter().zip(truth).all(|(&l, &t)| *map.entry(t).or_insert(l) == l && *inverse.entry(l).or_insert(t) == t)
}

#[test]
fn recovers_blob_count_with_high_silhouette() {
    for k in [2, 3] {
        for seed in [0, 1, 2] {
            let (pts, truth) = blobs(k, 40, 4, seed);
            let fit = fit_domain_labels(&pts, 4, 2..=6, seed).unwrap();
            assert_eq!(fit.k, k, "seed {seed} scores {:?}", fit.scores);
            assert!(fit.silhouette > 0.9, "{}", fit.silhouette);
            assert!(same_partition(&fit.labels, &truth));
            assert_eq!(fit, fit_domain_labels(&pts, 4, 2..=6, seed).unwrap());
        }
    }
}

#[test]
fn kmeans_objective_is_monotone_and_assignments_nearest() {
    let (pts, _) = blobs(3, 25, 3, 9);
    let fit = kmeans(&pts, 3, 4, 9).unwrap();
    for w in fit.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
    for (i, &l) in fit.labels.iter().enumerate() {
        let x = &pts[i * 3..i * 3 + 3];
        let d = |c: usize| fit.centroids[c * 3..c * 3 + 3].iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        assert!((0..4).all(|c| d(l) <= d(c) + 1e-9));
    }
}

#[test]
fn silhouette_of_perfect_split_is_high_and_of_bad_split_low() {
    let (pts, truth) = blobs(2, 20, 2, 3);
    let dist = pairwise_distances(&pts, 2);
    let good = silhouette(&dist, 40, &truth, 2);
    let bad: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let poor = silhouette(&dist, 40, &bad, 2);
    assert!(good > 0.9 && poor < 0.1, "{good} {poor}");
}
