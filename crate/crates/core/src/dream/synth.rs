//! Target activations sampled around metadata clusters, and inputs optimized
//! so the teacher reproduces them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metadata::Metadata;
use crate::error::{Error, Result};
use crate::io::{read_blob, write_blob};
use crate::nn::{Model, OutputGrads};
use crate::rng::derived_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `count x dim`.
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

/// `n_per_cluster` targets per cluster: `centroid + sum_j e_j sqrt(var_j) c_j`
/// with `e_j ~ N(0, noise_scale^2)`.
pub fn generate_targets(meta: &Metadata, n_per_cluster: usize, noise_scale: f64, seed: u64) -> Result<Targets> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise scale must be >= 0, got {noise_scale}")));
    }
    let mut data = Vec::with_capacity(meta.clusters.len() * n_per_cluster * meta.dim);
    let mut labels = Vec::with_capacity(meta.clusters.len() * n_per_cluster);
    for (ci, cluster) in meta.clusters.iter().enumerate() {
        let mut rng = derived_rng(seed, &[ci as u64]);
        for _ in 0..n_per_cluster {
            let mut t = cluster.centroid.clone();
            if noise_scale > 0.0 {
                for (j, &var) in cluster.variances.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let coef = noise_scale * z * var.sqrt();
                    for (tv, cv) in t.iter_mut().zip(cluster.components.item(j)) {
                        *tv += coef * cv;
                    }
                }
            }
            data.extend_from_slice(&t);
            labels.push(cluster.class);
        }
    }
    Ok(Targets {
        activations: Tensor::new(vec![labels.len(), meta.dim], data)?,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DreamInit {
    Zeros,
    /// Gaussian noise with this standard deviation.
    Noise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    pub steps: usize,
    pub lr: f64,
    pub init: DreamInit,
    /// Inputs are clamped to `[lo, hi]` after every step.
    pub clamp: Option<(f64, f64)>,
    /// Stop early once `|a - t| / |t|` drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Weight of an optional `|x|^2` input prior added to the objective.
    #[serde(default)]
    pub input_l2: f64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            steps: 500,
            lr: 0.1,
            init: DreamInit::Noise(0.1),
            clamp: Some((-10.0, 10.0)),
            tol: 1e-3,
            seed: 0,
            input_l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DreamBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub achieved: Tensor,
    pub labels: Vec<usize>,
    /// `|achieved - target|` per sample.
    pub residuals: Vec<f64>,
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl DreamBatch {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    /// `|achieved - target| / |target|` per sample (absolute when the target is 0).
    pub fn relative_residuals(&self) -> Vec<f64> {
        self.targets
            .rows()
            .zip(&self.residuals)
            .map(|(t, &r)| {
                let n = l2(t.iter().copied());
                if n > 0.0 {
                    r / n
                } else {
                    r
                }
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect())?;
        let residuals = Tensor::new(vec![self.len()], self.residuals.clone())?;
        write_blob(
            dir,
            stem,
            &[
                ("inputs", &self.inputs),
                ("targets", &self.targets),
                ("achieved", &self.achieved),
                ("labels", &labels),
                ("residuals", &residuals),
            ],
            None,
            serde_json::json!({ "kind": "dream_batch" }),
        )
    }

    /// Loads a batch and checks every stored residual against one recomputed
    /// from the stored activations.
    pub fn load(sidecar: &Path) -> Result<DreamBatch> {
        let (_, mut t) = read_blob(sidecar)?;
        let mut take = |name: &str| t.remove(name).ok_or_else(|| Error::Corrupt(format!("dream batch lacks `{name}`")));
        let inputs = take("inputs")?;
        let targets = take("targets")?;
        let achieved = take("achieved")?;
        let labels: Vec<usize> = take("labels")?.data().iter().map(|&v| v as usize).collect();
        let residuals = take("residuals")?.into_data();
        let n = residuals.len();
        if inputs.batch() != n || targets.batch() != n || achieved.batch() != n || labels.len() != n {
            return Err(Error::Corrupt("dream batch tensors disagree on sample count".into()));
        }
        for (i, (&r, (a, t))) in residuals.iter().zip(achieved.rows().zip(targets.rows())).enumerate() {
            let again = l2(a.iter().zip(t).map(|(x, y)| x - y));
            if (again - r).abs() > 1e-9 {
                return Err(Error::Corrupt(format!("sample {i}: stored residual {r} but activations give {again}")));
            }
        }
        Ok(DreamBatch {
            inputs,
            targets,
            achieved,
            labels,
            residuals,
        })
    }
}

/// Squared distance between the teacher's `layer` activation and `target`,
/// with its gradient with respect to the input.
fn objective(teacher: &Model, layer: &str, x: &Tensor, target: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let capture: BTreeSet<String> = [layer.to_string()].into();
    let fwd = teacher.forward(x, &capture)?;
    let a = fwd.captured.get(layer).ok_or_else(|| Error::MissingCapture(layer.to_string()))?;
    let r: Vec<f64> = a.data().iter().zip(target).map(|(p, q)| p - q).collect();
    let value: f64 = r.iter().map(|v| v * v).sum();
    let seed = OutputGrads {
        outputs: None,
        captured: [(layer.to_string(), Tensor::new(a.shape().to_vec(), r.iter().map(|v| 2.0 * v).collect())?)].into(),
    };
    let g = teacher.backward(&fwd.tape, &seed)?;
    Ok((value, a.data().to_vec(), g.input.into_data()))
}

struct Dream {
    input: Vec<f64>,
    achieved: Vec<f64>,
    residual: f64,
    losses: Vec<f64>,
}

fn clamp(v: &mut [f64], range: Option<(f64, f64)>) {
    if let Some((lo, hi)) = range {
        v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
    }
}

fn dream_one(teacher: &Model, layer: &str, target: &[f64], start: Vec<f64>, cfg: &DreamConfig, index: usize) -> Result<Dream> {
    let mut shape = vec![1];
    shape.extend_from_slice(teacher.input_shape());
    let diverged = |_| Error::DreamDiverged(index);
    let tnorm = l2(target.iter().copied());
    let scale = if tnorm > 0.0 { tnorm } else { 1.0 };

    let mut x = start;
    clamp(&mut x, cfg.clamp);
    let mut lr = cfg.lr;
    let eval = |x: &[f64]| -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let (v, a, mut g) = objective(teacher, layer, &Tensor::new(shape.clone(), x.to_vec())?, target)?;
        let mut total = v;
        if cfg.input_l2 != 0.0 {
            total += cfg.input_l2 * x.iter().map(|xi| xi * xi).sum::<f64>();
            g.iter_mut().zip(x).for_each(|(gi, xi)| *gi += 2.0 * cfg.input_l2 * xi);
        }
        Ok((total, v, a, g))
    };
    let (mut value, mut sq_residual, mut achieved, mut grad) = eval(&x)?;
    let mut losses = vec![value];
    for _ in 0..cfg.steps {
        if sq_residual.sqrt() / scale < cfg.tol || grad.iter().all(|&g| g == 0.0) {
            break;
        }
        let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - lr * gi).collect();
        clamp(&mut cand, cfg.clamp);
        if cand.iter().any(|v| !v.is_finite()) {
            return Err(Error::DreamDiverged(index));
        }
        let (v, r, a, g) = eval(&cand).map_err(diverged)?;
        if v <= value {
            x = cand;
            value = v;
            sq_residual = r;
            achieved = a;
            grad = g;
            lr *= 1.5;
        } else {
            lr *= 0.5;
        }
        if !value.is_finite() || !(lr > 0.0) {
            return Err(Error::DreamDiverged(index));
        }
        losses.push(value);
    }
    Ok(Dream {
        input: x,
        achieved,
        residual: sq_residual.sqrt(),
        losses,
    })
}

/// Optimizes one input per target row so the teacher's `layer` activation
/// matches it. Samples are independent and run in parallel; sample `i` draws
/// its initial noise from the stream `(seed, i)`.
pub fn generate_dreams(teacher: &Model, layer: &str, targets: &Targets, cfg: &DreamConfig) -> Result<DreamBatch> {
    let starts: Vec<Vec<f64>> = (0..targets.labels.len())
        .map(|i| initial_input(teacher, cfg, i))
        .collect::<Result<_>>()?;
    generate_dreams_from(teacher, layer, targets, starts, cfg)
}

fn initial_input(teacher: &Model, cfg: &DreamConfig, index: usize) -> Result<Vec<f64>> {
    let len: usize = teacher.input_shape().iter().product();
    Ok(match cfg.init {
        DreamInit::Zeros => vec![0.0; len],
        DreamInit::Noise(sigma) => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("init noise: {e}")))?;
            let mut rng = derived_rng(cfg.seed, &[index as u64]);
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        }
    })
}

/// Like [`generate_dreams`] but starting from caller-supplied inputs.
pub fn generate_dreams_from(
    teacher: &Model,
    layer: &str,
    targets: &Targets,
    starts: Vec<Vec<f64>>,
    cfg: &DreamConfig,
) -> Result<DreamBatch> {
    let width: usize = teacher
        .layer_output_shape(layer)
        .ok_or_else(|| Error::MissingCapture(layer.to_string()))?
        .iter()
        .product();
    if targets.activations.item_len() != width {
        return Err(Error::ShapeMismatch {
            expected: vec![width],
            actual: vec![targets.activations.item_len()],
        });
    }
    if starts.len() != targets.labels.len() {
        return Err(Error::LengthMismatch {
            expected: targets.labels.len(),
            actual: starts.len(),
        });
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("dream lr must be positive, got {}", cfg.lr)));
    }
    let dreams: Vec<Dream> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| dream_one(teacher, layer, targets.activations.item(i), s, cfg, i))
        .collect::<Result<_>>()?;
    let n = dreams.len();
    let mut in_shape = vec![n];
    in_shape.extend_from_slice(teacher.input_shape());
    Ok(DreamBatch {
        inputs: Tensor::new(in_shape, dreams.iter().flat_map(|d| d.input.iter().copied()).collect())?,
        targets: targets.activations.clone(),
        achieved: Tensor::new(vec![n, width], dreams.iter().flat_map(|d| d.achieved.iter().copied()).collect())?,
        labels: targets.labels.clone(),
        residuals: dreams.iter().map(|d| d.residual).collect(),
    })
}

/// Loss trajectory of a single dream, for inspecting the optimizer.
pub fn dream_trajectory(teacher: &Model, layer: &str, target: &[f64], start: Vec<f64>, cfg: &DreamConfig) -> Result<Vec<f64>> {
    Ok(dream_one(teacher, layer, target, start, cfg, 0)?.losses)
}
