//! Seeded K-means with k-means++ initialization.
//!
//! Lloyd iterations run until the largest centroid shift drops below `tol`
//! or `max_iters` is reached; clusters that empty out are re-seeded from the
//! point farthest from its centroid. Everything is deterministic in the
//! provided RNG.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { clusters: 16, max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// (M, d) converged centroids.
    pub centroids: Array2<f64>,
    /// Nearest-centroid index per input row.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sqdist(a: &ArrayView2<f64>, i: usize, c: &Array2<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..a.ncols() {
        let t = a[[i, d]] - c[[j, d]];
        s += t * t;
    }
    s
}

/// Nearest centroid of one row; ties break to the lowest centroid index.
pub fn nearest_centroid(point: &[f64], centroids: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..centroids.nrows() {
        let mut s = 0.0;
        for d in 0..point.len() {
            let t = point[d] - centroids[[j, d]];
            s += t * t;
        }
        if s < best_d {
            best_d = s;
            best = j;
        }
    }
    best
}

fn count_distinct_rows(points: &ArrayView2<f64>) -> usize {
    let mut distinct: Vec<Vec<u64>> = Vec::new();
    for i in 0..points.nrows() {
        let key: Vec<u64> = points.row(i).iter().map(|v| v.to_bits()).collect();
        if !distinct.contains(&key) {
            distinct.push(key);
        }
    }
    distinct.len()
}

/// Runs K-means on the rows of `points`.
pub fn kmeans(points: &ArrayView2<f64>, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Result<KMeansResult> {
    let n = points.nrows();
    let d = points.ncols();
    let m = cfg.clusters;
    if m == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    if count_distinct_rows(points) < m {
        return Err(Error::Degeneracy(format!(
            "{m} clusters requested but only {} distinct points; use a smaller M",
            count_distinct_rows(points)
        )));
    }

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((m, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut min_sq: Vec<f64> = (0..n).map(|i| sqdist(points, i, &centroids, 0)).collect();
    for c in 1..m {
        let total: f64 = min_sq.iter().sum();
        let chosen = if total <= 0.0 {
            // all remaining mass on existing centroids; pick any non-duplicate
            (0..n).find(|&i| min_sq[i] > 0.0).unwrap_or(rng.random_range(0..n))
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in min_sq.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for i in 0..n {
            min_sq[i] = min_sq[i].min(sqdist(points, i, &centroids, c));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        for i in 0..n {
            assignments[i] = nearest_centroid(points.row(i).as_slice().unwrap(), &centroids);
        }
        let mut sums = Array2::<f64>::zeros((m, d));
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assignments[i]] += 1;
            let mut row = sums.row_mut(assignments[i]);
            row += &points.row(i);
        }
        // re-seed empty clusters from the point farthest from its centroid
        for c in 0..m {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sqdist(points, a, &centroids, assignments[a]);
                        let db = sqdist(points, b, &centroids, assignments[b]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                sums.row_mut(c).assign(&points.row(far));
                counts[c] = 1;
                // pull the stolen point out of its old cluster's mean
                let old = assignments[far];
                if old != c && counts[old] > 1 {
                    counts[old] -= 1;
                    let mut row = sums.row_mut(old);
                    row -= &points.row(far);
                }
                assignments[far] = c;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..m {
            let inv = 1.0 / counts[c] as f64;
            let mut delta = 0.0;
            for j in 0..d {
                let new = sums[[c, j]] * inv;
                let t = new - centroids[[c, j]];
                delta += t * t;
                centroids[[c, j]] = new;
            }
            shift = shift.max(delta.sqrt());
        }
        if shift < cfg.tol {
            break;
        }
    }
    // final assignment pass so the nearest-centroid invariant holds exactly
    for i in 0..n {
        assignments[i] = nearest_centroid(points.row(i).as_slice().unwrap(), &centroids);
    }
    Ok(KMeansResult { centroids, assignments, iterations })
}
