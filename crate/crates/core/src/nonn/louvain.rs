//! Louvain modularity maximization on weighted undirected graphs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::FilterGraph;
use crate::error::{Error, Result};
use crate::rng::derived_rng;

const MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    /// Community of every node, numbered by first appearance.
    pub community: Vec<usize>,
    pub modularity: f64,
    pub resolution: f64,
    /// Ascending node lists, one per community.
    pub communities: Vec<Vec<usize>>,
}

impl PartitionResult {
    pub fn from_labels(labels: &[usize], modularity: f64, resolution: f64) -> PartitionResult {
        let community = canonical(labels);
        let count = community.iter().max().map_or(0, |m| m + 1);
        let mut communities = vec![Vec::new(); count];
        for (node, &c) in community.iter().enumerate() {
            communities[c].push(node);
        }
        PartitionResult {
            community,
            modularity,
            resolution,
            communities,
        }
    }
}

/// Relabels so communities are numbered in order of their lowest node.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// `Q = (1/2m) sum_ij [A_ij - gamma k_i k_j / 2m] delta(c_i, c_j)` for a dense
/// symmetric matrix. A graph without edges has modularity 0.
pub fn modularity_dense(n: usize, a: &[f64], labels: &[usize], resolution: f64) -> f64 {
    let k: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    if m2 <= 0.0 {
        return 0.0;
    }
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut inside = vec![0.0; groups];
    let mut tot = vec![0.0; groups];
    for i in 0..n {
        tot[labels[i]] += k[i];
        for j in 0..n {
            if labels[i] == labels[j] {
                inside[labels[i]] += a[i * n + j];
            }
        }
    }
    inside
        .iter()
        .zip(&tot)
        .map(|(&e, &t)| e - resolution * t * t / m2)
        .sum::<f64>()
        / m2
}

pub fn modularity(graph: &FilterGraph, labels: &[usize], resolution: f64) -> f64 {
    modularity_dense(graph.nodes, &graph.dense(), labels, resolution)
}

/// One round of local moves on a dense (possibly self-looped) matrix.
/// Returns the community of every node and whether anything moved.
fn local_moves(n: usize, a: &[f64], resolution: f64, seed: u64, level: u64) -> (Vec<usize>, bool) {
    let k: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = k.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &[level]));
    let threshold = 1e-12 * m2;
    let mut links = vec![0.0; n];
    let mut touched = Vec::with_capacity(n);
    let mut any = false;
    for _ in 0..MAX_SWEEPS {
        let mut moved = false;
        for &i in &order {
            let home = comm[i];
            touched.clear();
            for j in 0..n {
                let w = a[i * n + j];
                if j != i && w > 0.0 {
                    if links[comm[j]] == 0.0 {
                        touched.push(comm[j]);
                    }
                    links[comm[j]] += w;
                }
            }
            tot[home] -= k[i];
            let gain = |c: usize, l: f64| l - resolution * tot[c] * k[i] / m2;
            let mut best = (home, gain(home, links[home]));
            touched.sort_unstable();
            for &c in &touched {
                let g = gain(c, links[c]);
                if g > best.1 + threshold {
                    best = (c, g);
                }
            }
            tot[best.0] += k[i];
            if best.0 != home {
                comm[i] = best.0;
                moved = true;
                any = true;
            }
            for &c in &touched {
                links[c] = 0.0;
            }
            links[home] = 0.0;
        }
        if !moved {
            break;
        }
    }
    (canonical(&comm), any)
}

/// Louvain: repeated local moving and community aggregation until no node
/// changes community. The node sweep order of level `l` is a shuffle drawn
/// from the stream `(seed, l)`. A graph without edges comes back as
/// singletons with modularity 0.
pub fn louvain(graph: &FilterGraph, resolution: f64, seed: u64) -> Result<PartitionResult> {
    if graph.nodes == 0 {
        return Err(Error::InvalidArgument("louvain needs at least one node".into()));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidArgument(format!("resolution must be positive, got {resolution}")));
    }
    graph.validate()?;
    let base = graph.dense();
    let mut labels: Vec<usize> = (0..graph.nodes).collect();
    if graph.total_weight() <= 0.0 {
        return Ok(PartitionResult::from_labels(&labels, 0.0, resolution));
    }
    let mut a = base.clone();
    let mut n = graph.nodes;
    for level in 0u64.. {
        let (comm, moved) = local_moves(n, &a, resolution, seed, level);
        if !moved {
            break;
        }
        labels.iter_mut().for_each(|l| *l = comm[*l]);
        let m = comm.iter().max().map_or(0, |x| x + 1);
        let mut next = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                next[comm[i] * m + comm[j]] += a[i * n + j];
            }
        }
        a = next;
        n = m;
    }
    let q = modularity_dense(graph.nodes, &base, &labels, resolution);
    Ok(PartitionResult::from_labels(&labels, q, resolution))
}
