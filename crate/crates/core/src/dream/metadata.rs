//! Per-class cluster summaries of teacher activations: the only artifact the
//! dream pipeline keeps from real data.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans_fit;
use super::pca::{pca_fit, pca_fit_explained};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::{f64s_to_le_bytes, le_bytes_to_f64s};
use crate::nn::{capture_batched, LayerKind, Model};
use crate::rng::{derive_seed, derived_rng};
use crate::tensor::Tensor;

pub const METADATA_VERSION: u32 = 1;
const EXPLAINED_TARGET: f64 = 0.95;
const AUTO_COMPONENT_CAP: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-10;

/// How many principal components to keep per cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    /// Smallest count explaining 95% of the cluster variance, at most 10.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub class: usize,
    pub size: usize,
    pub centroid: Vec<f64>,
    /// `m x dim`, orthonormal rows.
    pub components: Tensor,
    /// Descending, non-negative.
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub layer: String,
    pub dim: usize,
    pub classes: usize,
    pub k: usize,
    pub components: Components,
    pub fraction: f64,
    pub seed: u64,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub fraction: f64,
    pub k: usize,
    pub components: Components,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            fraction: 0.1,
            k: 3,
            components: Components::Auto,
            seed: 0,
        }
    }
}

/// First global-average-pool layer of a model.
pub fn avgpool_layer(model: &Model) -> Option<String> {
    model
        .spec()
        .layers
        .iter()
        .find(|l| matches!(l.kind, LayerKind::AvgpoolGlobal))
        .map(|l| l.id.clone())
}

/// Samples `floor(fraction * n_c)` inputs of every class, captures the
/// teacher's `layer` activations, clusters each class into `k` groups and
/// summarizes every group by its centroid and principal components.
pub fn extract_metadata(teacher: &Model, dataset: &LabeledDataset, layer: &str, cfg: &ExtractConfig) -> Result<Metadata> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {}", cfg.fraction)));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let dim: usize = teacher
        .layer_output_shape(layer)
        .ok_or_else(|| Error::MissingCapture(layer.to_string()))?
        .iter()
        .product();
    let mut clusters = Vec::new();
    for class in 0..dataset.classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        let take = (cfg.fraction * idx.len() as f64).floor() as usize;
        if take < cfg.k {
            return Err(Error::InvalidArgument(format!(
                "class {class}: {take} sampled examples cannot form {} clusters",
                cfg.k
            )));
        }
        idx.shuffle(&mut derived_rng(cfg.seed, &[0, class as u64]));
        idx.truncate(take);
        idx.sort_unstable();
        let acts = capture_batched(teacher, &dataset.inputs.select(&idx), layer, 256)?;
        let acts = acts.reshape(vec![take, dim])?;
        let km = kmeans_fit(&acts, cfg.k, derive_seed(cfg.seed, &[1, class as u64]), KMEANS_MAX_ITERS, KMEANS_TOL)?;
        for (c, size) in km.cluster_sizes().into_iter().enumerate() {
            let members: Vec<usize> = (0..take).filter(|&i| km.assignments[i] == c).collect();
            let points = acts.select(&members);
            let centroid = mean_rows(&points);
            let (components, variances) = if size < 2 {
                (Tensor::zeros(&[0, dim]), Vec::new())
            } else {
                let pca = match cfg.components {
                    Components::Auto => pca_fit_explained(&points, EXPLAINED_TARGET, AUTO_COMPONENT_CAP)?,
                    Components::Fixed(m) => pca_fit(&points, m.min(size - 1).min(dim))?,
                };
                (pca.components, pca.variances)
            };
            clusters.push(Cluster {
                class,
                size,
                centroid,
                components,
                variances,
            });
        }
    }
    Ok(Metadata {
        layer: layer.to_string(),
        dim,
        classes: dataset.classes,
        k: cfg.k,
        components: cfg.components,
        fraction: cfg.fraction,
        seed: cfg.seed,
        clusters,
    })
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.item_len()];
    for row in t.rows() {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = t.batch() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

impl Metadata {
    pub fn clusters_of(&self, class: usize) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(move |c| c.class == class)
    }

    /// Number of stored dim-length vectors (centroids plus components) per class.
    pub fn stored_vectors_per_class(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for c in &self.clusters {
            out[c.class] += 1 + c.components.batch();
        }
        out
    }

    pub fn total_clustered(&self) -> usize {
        self.clusters.iter().map(|c| c.size).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MetadataDoc::from(self)).expect("metadata serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Metadata> {
        let doc: MetadataDoc = serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        doc.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Metadata> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Metadata::from_json_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterDoc {
    class: usize,
    size: usize,
    m: usize,
    centroid: String,
    components: String,
    variances: String,
}

#[derive(Serialize, Deserialize)]
struct MetadataDoc {
    version: u32,
    layer: String,
    dim: usize,
    classes: usize,
    k: usize,
    components: Components,
    fraction: f64,
    seed: u64,
    clusters: Vec<ClusterDoc>,
}

fn enc(v: &[f64]) -> String {
    B64.encode(f64s_to_le_bytes(v))
}

fn dec(s: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Corrupt(format!("metadata {what}: {e}")))?;
    let v = le_bytes_to_f64s(&bytes)?;
    if v.len() != expect {
        return Err(Error::Corrupt(format!("metadata {what}: expected {expect} values, found {}", v.len())));
    }
    Ok(v)
}

impl From<&Metadata> for MetadataDoc {
    fn from(m: &Metadata) -> Self {
        MetadataDoc {
            version: METADATA_VERSION,
            layer: m.layer.clone(),
            dim: m.dim,
            classes: m.classes,
            k: m.k,
            components: m.components,
            fraction: m.fraction,
            seed: m.seed,
            clusters: m
                .clusters
                .iter()
                .map(|c| ClusterDoc {
                    class: c.class,
                    size: c.size,
                    m: c.components.batch(),
                    centroid: enc(&c.centroid),
                    components: enc(c.components.data()),
                    variances: enc(&c.variances),
                })
                .collect(),
        }
    }
}

impl TryFrom<MetadataDoc> for Metadata {
    type Error = Error;

    fn try_from(doc: MetadataDoc) -> Result<Metadata> {
        if doc.version != METADATA_VERSION {
            return Err(Error::Corrupt(format!("unsupported metadata version {}", doc.version)));
        }
        let dim = doc.dim;
        let clusters = doc
            .clusters
            .into_iter()
            .map(|c| {
                if c.class >= doc.classes {
                    return Err(Error::Corrupt(format!("cluster class {} out of range", c.class)));
                }
                Ok(Cluster {
                    class: c.class,
                    size: c.size,
                    centroid: dec(&c.centroid, dim, "centroid")?,
                    components: Tensor::new(vec![c.m, dim], dec(&c.components, c.m * dim, "components")?)?,
                    variances: dec(&c.variances, c.m, "variances")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Metadata {
            layer: doc.layer,
            dim,
            classes: doc.classes,
            k: doc.k,
            components: doc.components,
            fraction: doc.fraction,
            seed: doc.seed,
            clusters,
        })
    }
}
