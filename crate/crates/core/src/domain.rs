//! Unsupervised domain labels: K-means with k-means++ seeding, model selection by silhouette.

use rand::Rng;

use crate::error::{CaupsiError, Result};
use crate::rng;
use crate::tensor::gemm;

const MAX_ITERS: usize = 50;
const TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainLabeler {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub silhouette: f64,
    /// `(k, silhouette)` for every candidate.
    pub scores: Vec<(usize, f64)>,
}

impl DomainLabeler {
    /// Nearest centroid of `x`.
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest(x, &self.centroids, self.dim).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    centroids
        .chunks(dim)
        .map(|c| sq_dist(x, c))
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
}

/// Lloyd iterations from k-means++ seeds; stops after 50 iterations or when the
/// objective improves by less than 1e-6 (relative).
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.len() / dim.max(1);
    if dim == 0 || points.len() != n * dim || k == 0 || n < k {
        return Err(CaupsiError::Config(format!("k-means with k={k} on {n} points of width {dim}")));
    }
    let mut r = rng::named(seed, &format!("kmeans.{k}"));
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    let first = r.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            r.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut labels = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut obj = 0.0;
        for (i, l) in labels.iter_mut().enumerate() {
            let (c, d) = nearest(row(i), &centroids, dim);
            *l = c;
            obj += d;
        }
        let done = objective
            .last()
            .is_some_and(|&prev: &f64| prev - obj <= TOL * prev.max(1e-300));
        objective.push(obj);
        if done {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l * dim..(l + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansFit {
        k,
        centroids,
        labels,
        objective,
    })
}

/// Full pairwise Euclidean distance matrix, `n x n`.
pub fn pairwise_distances(points: &[f64], dim: usize) -> Vec<f64> {
    let n = points.len() / dim;
    let mut gram = vec![0.0f64; n * n];
    gemm(n, dim, n, points, false, points, true, 0.0, &mut gram);
    let norms: Vec<f64> = (0..n).map(|i| gram[i * n + i]).collect();
    for i in 0..n {
        for j in 0..n {
            let v = norms[i] + norms[j] - 2.0 * gram[i * n + j];
            gram[i * n + j] = if i == j { 0.0 } else { v.max(0.0).sqrt() };
        }
    }
    gram
}

/// Mean silhouette over all points; singleton clusters contribute 0.
pub fn silhouette(dist: &[f64], n: usize, labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist[i * n + j];
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

/// Fits K-means for every `k` in `k_range` and keeps the one with the highest silhouette.
pub fn fit_domain_labels(points: &[f64], dim: usize, k_range: std::ops::RangeInclusive<usize>, seed: u64) -> Result<DomainLabeler> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    let k_max = *k_range.end();
    if *k_range.start() < 2 || k_range.is_empty() {
        return Err(CaupsiError::Config(format!("domain k range {k_range:?} must start at 2 or more")));
    }
    if n < k_max + 1 {
        return Err(CaupsiError::Config(format!("{n} points are too few for k up to {k_max}")));
    }
    let first = &points[..dim];
    if points.chunks(dim).all(|r| r == first) {
        return Err(CaupsiError::Config("domain features are all identical; clustering is undefined".into()));
    }
    let dist = pairwise_distances(points, dim);
    let mut best: Option<(KMeansFit, f64)> = None;
    let mut scores = Vec::new();
    for k in k_range {
        let fit = kmeans(points, dim, k, seed)?;
        let s = silhouette(&dist, n, &fit.labels, k);
        scores.push((k, s));
        if best.as_ref().map_or(true, |(_, bs)| s > *bs) {
            best = Some((fit, s));
        }
    }
    let (fit, s) = best.expect("non-empty k range");
    Ok(DomainLabeler {
        k: fit.k,
        dim,
        centroids: fit.centroids,
        labels: fit.labels,
        silhouette: s,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centres: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0);
        let nd = Normal::new(0.0, sigma).unwrap();
        let mut out = Vec::new();
        for c in centres {
            for _ in 0..per {
                out.push(c[0] + nd.sample(&mut r));
                out.push(c[1] + nd.sample(&mut r));
            }
        }
        out
    }

    #[test]
    fn objective_never_increases() {
        let pts = blobs(&[[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]], 40, 1.0, 3);
        for k in 2..=6 {
            let f = kmeans(&pts, 2, k, 9).unwrap();
            for w in f.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "k={k}: {:?}", f.objective);
            }
        }
    }

    #[test]
    fn silhouette_in_range_and_matches_brute_force() {
        let pts = blobs(&[[0.0, 0.0], [2.0, 0.0]], 15, 1.0, 5);
        let n = 30;
        let f = kmeans(&pts, 2, 3, 1).unwrap();
        let d = pairwise_distances(&pts, 2);
        let s = silhouette(&d, n, &f.labels, 3);
        assert!((-1.0..=1.0).contains(&s));
        let dist = |i: usize, j: usize| sq_dist(&pts[2 * i..2 * i + 2], &pts[2 * j..2 * j + 2]).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let mean_to = |c: usize| {
                let m: Vec<usize> = (0..n).filter(|&j| j != i && f.labels[j] == c).collect();
                (m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64, m.len())
            };
            let (a, na) = mean_to(f.labels[i]);
            if na == 0 {
                continue;
            }
            let b = (0..3).filter(|&c| c != f.labels[i]).map(|c| mean_to(c).0).fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        assert!((s - total / n as f64).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(fit_domain_labels(&[1.0; 40], 2, 2..=8, 0).is_err());
        assert!(fit_domain_labels(&[0.0, 1.0, 2.0, 3.0], 2, 2..=8, 0).is_err());
    }
}
