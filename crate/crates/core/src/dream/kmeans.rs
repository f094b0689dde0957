//! k-means++ seeding followed by Lloyd iterations.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k x dim`.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry from the seeding.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.batch()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point (ties go to the lower index) and the
/// resulting inertia.
fn assign(points: &Tensor, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(p, cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus(points: &Tensor, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    let n = points.batch();
    let mut centroids = vec![points.item(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points.rows().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        let c = points.item(next).to_vec();
        for (d, p) in d2.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters the rows of `points`. Stops after `max_iters` Lloyd updates or
/// once no centroid moves by more than `tol` (Euclidean).
pub fn kmeans_fit(points: &Tensor, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = points.shape().first().copied().unwrap_or(0);
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let dim = points.item_len();
    let mut centroids = plus_plus(points, k, seed);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed to the point currently worst served
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                sums[c] = points.item(far).to_vec();
                dists[far] = 0.0;
                shift = f64::INFINITY;
            } else {
                sums[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
                shift = shift.max(sq_dist(&sums[c], &centroids[c]).sqrt());
            }
        }
        centroids = sums;
        (assignments, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());
        if shift <= tol {
            break;
        }
    }
    let inertia = *history.last().expect("history is non-empty");
    Ok(KMeans {
        centroids: Tensor::new(vec![k, dim], centroids.concat())?,
        assignments,
        inertia,
        history,
        iterations,
    })
}
