//! Grouping filter communities into students and sizing each student to a
//! parameter budget.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::FilterGraph;
use super::louvain::PartitionResult;
use crate::error::{Error, Result};
use crate::nn::{count_params, LayerKind, LayerSpec, ModelSpec};

pub const ENSEMBLE_VERSION: u32 = 1;
/// Id of every student's last layer: its feature vector.
pub const FEATURE_LAYER: &str = "features";
const WIDTH_FLOOR: f64 = 1e-9;

/// Student body scaled by a width multiplier `w`; every hidden width becomes
/// `max(1, round(w * base))`. All templates end in a ReLU'd block with one
/// channel per assigned filter, reduced to the `features` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudentTemplate {
    /// `conv(k, pad) -> relu` per entry, then a feature conv with the same
    /// kernel, ReLU and global average pool.
    Cnn { channels: Vec<usize>, kernel: usize, padding: usize },
    /// Pre-activation wide-resnet body with `(depth - 4) / 6` blocks per group
    /// of `16w`, `32w`, `64w` channels, then a 1x1 feature conv.
    Wrn { depth: usize },
    /// Dense hidden layers, then a dense feature layer with ReLU.
    Mlp { hidden: Vec<usize> },
}

fn scaled(base: usize, w: f64) -> usize {
    ((base as f64 * w).round() as usize).max(1)
}

fn conv(id: impl Into<String>, channels: usize, kernel: usize, padding: usize, bias: bool) -> LayerSpec {
    LayerSpec::new(
        id,
        LayerKind::Conv2d {
            channels,
            kernel,
            stride: 1,
            padding,
            bias,
        },
    )
}

impl StudentTemplate {
    pub fn build(&self, width: f64, filters: usize, input_shape: &[usize]) -> Result<ModelSpec> {
        let mut layers = Vec::new();
        match self {
            StudentTemplate::Cnn { channels, kernel, padding } => {
                for (i, &c) in channels.iter().enumerate() {
                    layers.push(conv(format!("conv{}", i + 1), scaled(c, width), *kernel, *padding, true));
                    layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
                }
                layers.push(conv("feature_conv", filters, *kernel, *padding, true));
                layers.push(LayerSpec::new("feature_relu", LayerKind::Relu));
                layers.push(LayerSpec::new(FEATURE_LAYER, LayerKind::AvgpoolGlobal));
            }
            StudentTemplate::Wrn { depth } => {
                if *depth < 10 || (depth - 4) % 6 != 0 {
                    return Err(Error::InvalidSpec(format!("wrn student depth must be 6n+4, got {depth}")));
                }
                layers.push(conv("conv1", scaled(16, width), 3, 1, false));
                for (g, (base, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
                    for b in 0..(depth - 4) / 6 {
                        layers.push(LayerSpec::new(
                            format!("group{}_block{}", g + 1, b + 1),
                            LayerKind::ResidualBlock {
                                channels: scaled(base, width),
                                stride: if b == 0 { stride } else { 1 },
                            },
                        ));
                    }
                }
                layers.push(LayerSpec::new("bn_final", LayerKind::BatchnormStub));
                layers.push(LayerSpec::new("relu_final", LayerKind::Relu));
                layers.push(conv("feature_conv", filters, 1, 0, false));
                layers.push(LayerSpec::new("feature_relu", LayerKind::Relu));
                layers.push(LayerSpec::new(FEATURE_LAYER, LayerKind::AvgpoolGlobal));
            }
            StudentTemplate::Mlp { hidden } => {
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(LayerSpec::new(
                        format!("fc{}", i + 1),
                        LayerKind::Dense {
                            units: scaled(h, width),
                            bias: true,
                        },
                    ));
                    layers.push(LayerSpec::new(format!("relu{}", i + 1), LayerKind::Relu));
                }
                layers.push(LayerSpec::new(
                    "feature_fc",
                    LayerKind::Dense {
                        units: filters,
                        bias: true,
                    },
                ));
                layers.push(LayerSpec::new(FEATURE_LAYER, LayerKind::Relu));
            }
        }
        let spec = ModelSpec::new(input_shape.to_vec(), layers);
        spec.plan()?;
        Ok(spec)
    }

    /// Largest width in `(0, max_width]` whose student fits in `budget`
    /// parameters, with the spec and its parameter count.
    pub fn fit_width(&self, filters: usize, input_shape: &[usize], budget: usize, max_width: f64) -> Result<(f64, ModelSpec, usize)> {
        let size = |w: f64| -> Result<(ModelSpec, usize)> {
            let spec = self.build(w, filters, input_shape)?;
            let p = count_params(&spec)?;
            Ok((spec, p))
        };
        let (spec, p) = size(WIDTH_FLOOR)?;
        if p > budget {
            return Err(Error::Budget(format!(
                "budget of {budget} parameters is below the smallest student ({p} parameters for {filters} filters)"
            )));
        }
        let (top_spec, top_p) = size(max_width)?;
        if top_p <= budget {
            return Ok((max_width, top_spec, top_p));
        }
        let (mut lo, mut hi) = (WIDTH_FLOOR, max_width);
        let mut best = (spec, p);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            let (s, p) = size(mid)?;
            if p <= budget {
                lo = mid;
                best = (s, p);
            } else {
                hi = mid;
            }
        }
        Ok((lo, best.0, best.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentPlan {
    /// Teacher filters this student mimics, ascending.
    pub filters: Vec<usize>,
    pub importance: f64,
    pub width: f64,
    pub params: usize,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentEnsembleSpec {
    pub version: u32,
    pub teacher_layer: String,
    pub filter_count: usize,
    pub classes: usize,
    pub budget: usize,
    pub template: StudentTemplate,
    pub students: Vec<StudentPlan>,
    /// Dense layer over the concatenated student features.
    pub fusion: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub students: usize,
    pub budget: usize,
    pub template: StudentTemplate,
    #[serde(default = "default_max_width")]
    pub max_width: f64,
}

fn default_max_width() -> f64 {
    4.0
}

/// Greedy balanced grouping of communities into exactly `s` node groups.
///
/// Too many communities: communities are taken by decreasing importance
/// (ties: lowest id) and each goes to the currently lightest group (ties:
/// fewest members, then lowest index). Too few: the heaviest splittable group is split in two
/// the same way, node by node, until there are `s`.
pub fn group_communities(communities: &[Vec<usize>], importance: &[f64], s: usize) -> Result<Vec<Vec<usize>>> {
    if s == 0 {
        return Err(Error::InvalidArgument("need at least one student".into()));
    }
    let nodes: usize = communities.iter().map(Vec::len).sum();
    if s > nodes {
        return Err(Error::InvalidArgument(format!("{s} students cannot share {nodes} filters")));
    }
    let weight = |g: &[usize]| g.iter().map(|&n| importance[n]).sum::<f64>();
    let lpt = |items: Vec<(f64, Vec<usize>)>, bins: usize| {
        let mut items = items;
        items.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1[0].cmp(&b.1[0])));
        let mut out: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new()); bins];
        for (w, members) in items {
            let dest = (0..bins).fold(0, |best, b| {
                let key = |i: usize| (out[i].0, out[i].1.len());
                if key(b).0 < key(best).0 || (key(b).0 == key(best).0 && key(b).1 < key(best).1) {
                    b
                } else {
                    best
                }
            });
            out[dest].0 += w;
            out[dest].1.extend(members);
        }
        out.into_iter().map(|(_, mut g)| {
            g.sort_unstable();
            g
        })
    };
    let mut groups: Vec<Vec<usize>> = if communities.len() > s {
        let items = communities.iter().filter(|c| !c.is_empty()).map(|c| (weight(c), c.clone())).collect();
        lpt(items, s).collect()
    } else {
        communities.iter().filter(|c| !c.is_empty()).cloned().collect()
    };
    while groups.len() < s {
        let (idx, _) = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.len() >= 2)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, g)| {
                let w = weight(g);
                if w > best.1 {
                    (i, w)
                } else {
                    best
                }
            });
        let victim = groups.remove(idx);
        let items = victim.iter().map(|&n| (importance[n], vec![n])).collect();
        groups.extend(lpt(items, 2));
    }
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Turns a community partition of the filter graph into `cfg.students`
/// disjoint students, each sized to the largest width within the budget.
pub fn make_partitions(
    graph: &FilterGraph,
    partition: &PartitionResult,
    input_shape: &[usize],
    cfg: &EnsembleConfig,
) -> Result<StudentEnsembleSpec> {
    if partition.community.len() != graph.nodes {
        return Err(Error::LengthMismatch {
            expected: graph.nodes,
            actual: partition.community.len(),
        });
    }
    if !(cfg.max_width > 0.0 && cfg.max_width.is_finite()) {
        return Err(Error::InvalidArgument(format!("max width must be positive, got {}", cfg.max_width)));
    }
    let importance = graph.node_importance();
    let groups = group_communities(&partition.communities, &importance, cfg.students)?;
    let classes = graph.class_importance.len();
    let students = groups
        .into_iter()
        .map(|filters| {
            let (width, spec, params) = cfg.template.fit_width(filters.len(), input_shape, cfg.budget, cfg.max_width)?;
            Ok(StudentPlan {
                importance: filters.iter().map(|&f| importance[f]).sum(),
                filters,
                width,
                params,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = StudentEnsembleSpec {
        version: ENSEMBLE_VERSION,
        teacher_layer: graph.layer.clone(),
        filter_count: graph.nodes,
        classes,
        budget: cfg.budget,
        template: cfg.template.clone(),
        students,
        fusion: fusion_spec(graph.nodes, classes),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn fusion_spec(features: usize, classes: usize) -> ModelSpec {
    ModelSpec::new(
        vec![features],
        vec![
            LayerSpec::new(
                "fusion",
                LayerKind::Dense {
                    units: classes,
                    bias: true,
                },
            ),
            LayerSpec::new("output", LayerKind::SoftmaxOutput),
        ],
    )
}

impl StudentEnsembleSpec {
    /// Disjoint filter sets covering every filter, every student within budget
    /// and producing one feature per filter, fusion sized to match.
    pub fn validate(&self) -> Result<()> {
        if self.version != ENSEMBLE_VERSION {
            return Err(Error::Corrupt(format!("unsupported ensemble version {}", self.version)));
        }
        if self.students.is_empty() {
            return Err(Error::InvalidSpec("ensemble has no students".into()));
        }
        let mut owner = vec![None; self.filter_count];
        for (s, st) in self.students.iter().enumerate() {
            for &f in &st.filters {
                match owner.get_mut(f) {
                    None => return Err(Error::InvalidSpec(format!("student {s}: filter {f} out of range"))),
                    Some(Some(o)) => {
                        return Err(Error::InvalidSpec(format!("filter {f} assigned to students {o} and {s}")));
                    }
                    Some(slot) => *slot = Some(s),
                }
            }
            let p = count_params(&st.spec)?;
            if p != st.params || p > self.budget {
                return Err(Error::InvalidSpec(format!(
                    "student {s} has {p} parameters (recorded {}, budget {})",
                    st.params, self.budget
                )));
            }
            if st.spec.output_shape()? != vec![st.filters.len()] {
                return Err(Error::InvalidSpec(format!("student {s} does not emit one feature per filter")));
            }
        }
        if let Some(f) = owner.iter().position(Option::is_none) {
            return Err(Error::InvalidSpec(format!("filter {f} has no student")));
        }
        if self.fusion.input_shape != vec![self.filter_count] || self.fusion.output_shape()? != vec![self.classes] {
            return Err(Error::InvalidSpec("fusion layer does not match the students".into()));
        }
        Ok(())
    }

    pub fn student_params(&self) -> Vec<usize> {
        self.students.iter().map(|s| s.params).collect()
    }

    pub fn total_params(&self) -> Result<usize> {
        Ok(self.student_params().iter().sum::<usize>() + count_params(&self.fusion)?)
    }

    /// Feature widths in fusion order.
    pub fn feature_dims(&self) -> Vec<usize> {
        self.students.iter().map(|s| s.filters.len()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble spec serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<StudentEnsembleSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: StudentEnsembleSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }
}
