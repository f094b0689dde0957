//! Filter activation network over the channels of a teacher's final
//! convolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{capture_batched, LayerKind, Model};
use crate::tensor::Tensor;

pub const GRAPH_VERSION: u32 = 1;

/// How per-sample filter importances become an edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    /// `sum_s a_i(s) a_j(s)`.
    #[default]
    CoActivation,
    /// `sum_s min(a_i(s), a_j(s))`.
    Min,
    /// Pearson correlation over samples, negative values cut to 0.
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterGraph {
    pub version: u32,
    /// Teacher layer the filters were read from.
    pub layer: String,
    pub nodes: usize,
    /// Upper-triangle entries (`i < j`) with positive weight, sorted.
    pub edges: Vec<Edge>,
    /// `class_importance[c][f]`: mean importance of filter `f` over class `c`.
    pub class_importance: Vec<Vec<f64>>,
}

impl FilterGraph {
    /// From a dense symmetric matrix with zero diagonal.
    pub fn from_dense(nodes: usize, weights: &[f64], class_importance: Vec<Vec<f64>>) -> Result<FilterGraph> {
        if weights.len() != nodes * nodes {
            return Err(Error::LengthMismatch {
                expected: nodes * nodes,
                actual: weights.len(),
            });
        }
        let mut edges = Vec::new();
        for i in 0..nodes {
            if weights[i * nodes + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("non-zero diagonal at node {i}")));
            }
            for j in i + 1..nodes {
                let w = weights[i * nodes + j];
                if w != weights[j * nodes + i] {
                    return Err(Error::InvalidArgument(format!("weights not symmetric at ({i}, {j})")));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::InvalidArgument(format!("weight ({i}, {j}) = {w} is not finite and non-negative")));
                }
                if w > 0.0 {
                    edges.push(Edge { i, j, weight: w });
                }
            }
        }
        Ok(FilterGraph {
            version: GRAPH_VERSION,
            layer: String::new(),
            nodes,
            edges,
            class_importance,
        })
    }

    /// Dense symmetric `nodes x nodes` matrix, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.nodes;
        let mut w = vec![0.0; n * n];
        for e in &self.edges {
            w[e.i * n + e.j] = e.weight;
            w[e.j * n + e.i] = e.weight;
        }
        w
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&(i, j)))
            .map_or(0.0, |k| self.edges[k].weight)
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Importance of every filter averaged over classes.
    pub fn node_importance(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes];
        if self.class_importance.is_empty() {
            return out;
        }
        for row in &self.class_importance {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let c = self.class_importance.len() as f64;
        out.iter_mut().for_each(|o| *o /= c);
        out
    }

    /// Class with the largest mean importance for every filter.
    pub fn dominant_class(&self) -> Vec<usize> {
        (0..self.nodes)
            .map(|f| {
                (0..self.class_importance.len()).fold(0, |best, c| {
                    if self.class_importance[c][f] > self.class_importance[best][f] {
                        c
                    } else {
                        best
                    }
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != GRAPH_VERSION {
            return Err(Error::Corrupt(format!("unsupported graph version {}", self.version)));
        }
        let mut last = None;
        for e in &self.edges {
            if e.i >= e.j || e.j >= self.nodes {
                return Err(Error::Corrupt(format!("bad edge ({}, {}) for {} nodes", e.i, e.j, self.nodes)));
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(Error::Corrupt(format!("edge ({}, {}) has weight {}", e.i, e.j, e.weight)));
            }
            if last.is_some_and(|l| l >= (e.i, e.j)) {
                return Err(Error::Corrupt("edges not sorted or duplicated".into()));
            }
            last = Some((e.i, e.j));
        }
        if self.class_importance.iter().any(|r| r.len() != self.nodes) {
            return Err(Error::Corrupt("class importance rows do not match node count".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FilterGraph> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let g: FilterGraph = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        g.validate()?;
        Ok(g)
    }

    /// `i,j,weight` triplets.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,weight\n");
        for e in &self.edges {
            out.push_str(&format!("{},{},{}\n", e.i, e.j, e.weight));
        }
        out
    }
}

/// Last ReLU (or any last layer) producing `[c, h, w]` maps: the output of a
/// teacher's final convolution stage.
pub fn final_conv_layer(teacher: &Model) -> Option<String> {
    let spec = teacher.spec();
    let plan = spec.plan().ok()?;
    let spatial: Vec<usize> = (0..spec.layers.len()).filter(|&i| plan.output_shapes[i].len() == 3).collect();
    spatial
        .iter()
        .rev()
        .find(|&&i| matches!(spec.layers[i].kind, LayerKind::Relu))
        .or(spatial.last())
        .map(|&i| spec.layers[i].id.clone())
}

/// `n x F` filter importances: the spatial mean of each (non-negative part
/// of each) feature map of `layer`.
pub fn filter_importances(teacher: &Model, inputs: &Tensor, layer: &str) -> Result<Tensor> {
    let acts = capture_batched(teacher, inputs, layer, 256)?;
    let shape = acts.shape().to_vec();
    let n = shape[0];
    let f = shape.get(1).copied().unwrap_or(1);
    let spatial: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(n * f);
    for item in acts.rows() {
        for map in item.chunks(spatial) {
            out.push(map.iter().map(|v| v.max(0.0)).sum::<f64>() / spatial as f64);
        }
    }
    Tensor::new(vec![n, f], out)
}

/// Edge weights from an `n x F` importance matrix; diagonal zeroed.
pub fn edge_weights(importances: &Tensor, rule: EdgeRule) -> Vec<f64> {
    let n = importances.batch();
    let f = importances.item_len();
    let mut w = vec![0.0; f * f];
    let col = |j: usize| importances.rows().map(move |r| r[j]);
    match rule {
        EdgeRule::CoActivation | EdgeRule::Min => {
            for row in importances.rows() {
                for i in 0..f {
                    for j in i + 1..f {
                        w[i * f + j] += match rule {
                            EdgeRule::Min => row[i].min(row[j]),
                            _ => row[i] * row[j],
                        };
                    }
                }
            }
        }
        EdgeRule::Correlation => {
            let means: Vec<f64> = (0..f).map(|j| col(j).sum::<f64>() / n.max(1) as f64).collect();
            let sds: Vec<f64> = (0..f)
                .map(|j| col(j).map(|v| (v - means[j]).powi(2)).sum::<f64>().sqrt())
                .collect();
            for i in 0..f {
                for j in i + 1..f {
                    if sds[i] > 0.0 && sds[j] > 0.0 {
                        let cov: f64 = col(i).zip(col(j)).map(|(a, b)| (a - means[i]) * (b - means[j])).sum();
                        w[i * f + j] = (cov / (sds[i] * sds[j])).max(0.0);
                    }
                }
            }
        }
    }
    for i in 0..f {
        for j in i + 1..f {
            w[j * f + i] = w[i * f + j];
        }
    }
    w
}

/// Builds the filter activation network of `teacher` over `dataset`.
/// `layer` defaults to [`final_conv_layer`].
pub fn build_filter_graph(teacher: &Model, dataset: &LabeledDataset, layer: Option<&str>, rule: EdgeRule) -> Result<FilterGraph> {
    let layer = match layer {
        Some(l) => l.to_string(),
        None => final_conv_layer(teacher)
            .ok_or_else(|| Error::InvalidArgument("teacher has no convolutional feature maps".into()))?,
    };
    let imp = filter_importances(teacher, &dataset.inputs, &layer)?;
    let f = imp.item_len();
    if f < 2 {
        return Err(Error::InvalidArgument(format!("filter graph needs at least 2 filters, layer `{layer}` has {f}")));
    }
    let mut class_importance = vec![vec![0.0; f]; dataset.classes];
    let counts = dataset.histogram();
    for (row, &label) in imp.rows().zip(&dataset.labels) {
        for (acc, v) in class_importance[label].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (row, &c) in class_importance.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let mut g = FilterGraph::from_dense(f, &edge_weights(&imp, rule), class_importance)?;
    g.layer = layer;
    Ok(g)
}
