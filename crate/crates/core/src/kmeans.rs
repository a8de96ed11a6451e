//! k-means++ seeding followed by Lloyd iterations.
//!
//! Shared by RQ-KMeans, the OPQ sub-codebooks and visual-token selection so the degenerate
//! cases (one level, one subspace, identity rotation) produce bit-identical codebooks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, rng_for};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the largest centroid shift falls below `tol` times the data scale.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
}

/// Nearest centroid, lowest index on ties.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = math::sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centre uniform, each further centre drawn with probability
/// proportional to squared distance from the nearest chosen centre.
pub fn plusplus_seed(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| math::sq_dist(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // Every point already coincides with a centre.
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(math::sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Runs Lloyd iterations from explicit initial centroids. Empty clusters keep their centroid.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, cfg: KMeansConfig) -> KMeans {
    let dim = points[0].len();
    let k = init.len();
    let scale = points
        .iter()
        .map(|p| math::norm(p))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut centroids = init;
    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            math::axpy(1.0, p, &mut sums[a]);
            counts[a] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums[c].iter().map(|s| s * inv).collect();
            shift = shift.max(math::sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift <= cfg.tol * scale {
            break;
        }
    }
    let mut sse = 0.0;
    for (a, p) in assignments.iter_mut().zip(points) {
        let (idx, d) = nearest(&centroids, p);
        *a = idx;
        sse += d;
    }
    KMeans {
        centroids,
        assignments,
        sse,
        iterations,
    }
}

/// k-means++ then Lloyd, seeded from `(seed, stream)`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    stream: u64,
    cfg: KMeansConfig,
) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Infeasible(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("ragged point set".into()));
    }
    let mut rng = rng_for(seed, stream);
    let init = plusplus_seed(points, k, &mut rng);
    Ok(lloyd(points, init, cfg))
}

/// Sum of squared distances to the overall mean (the 1-means SSE).
pub fn total_sse(points: &[Vec<f64>]) -> f64 {
    let mean = math::mean_rows(points);
    points.iter().map(|p| math::sq_dist(p, &mean)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans(&pts, 1, 3, 0, KMeansConfig::default()).unwrap();
        assert_eq!(km.centroids[0], math::mean_rows(&pts));
    }

    #[test]
    fn too_few_points_is_infeasible() {
        let pts = vec![vec![0.0]];
        assert!(matches!(
            kmeans(&pts, 2, 0, 0, KMeansConfig::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn k_equals_n_puts_every_point_alone() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 6, 11, 0, KMeansConfig::default()).unwrap();
        assert_eq!(km.sse, 0.0);
        let mut a = km.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn sse_never_exceeds_one_means() {
        let mut rng = rng_for(5, 0);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        for k in 1..6 {
            let km = kmeans(&pts, k, 1, k as u64, KMeansConfig::default()).unwrap();
            assert!(km.sse <= total_sse(&pts) + 1e-12);
        }
    }
}
