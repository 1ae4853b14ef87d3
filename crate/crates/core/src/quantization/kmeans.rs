use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub iters: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { iters: 25, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k×dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean squared distance after each assignment step.
    pub distortion: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // rounding can leave `chosen` on a zero-weight tail point
            if d2[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(0);
            }
            chosen
        } else {
            0
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let newest = centroids[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &newest));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding over `points` (`n×dim`, row-major).
///
/// Empty clusters are re-seeded to the point farthest from its centroid.
/// Stops early once assignments no longer change.
pub fn kmeans_fit(points: &[f64], dim: usize, k: usize, opts: &KMeansOptions) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k-means needs k > 0".into()));
    }
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "k-means needs at least one {dim}-dimensional point, got {} values",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("k-means input contains non-finite values".into()));
    }
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = plus_plus_seed(points, dim, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut distortion: Vec<f64> = Vec::new();

    for _ in 0..opts.iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(row(i), &centroids, dim);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = d;
        }
        let current = dists.iter().sum::<f64>() / n as f64;
        if let Some(prev) = distortion.last() {
            debug_assert!(
                current <= prev * (1.0 + 1e-12) + 1e-300,
                "distortion rose from {prev} to {current}"
            );
        }
        distortion.push(current);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *c = s * inv;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[j * dim..(j + 1) * dim].copy_from_slice(row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        distortion,
    })
}
