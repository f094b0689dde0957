//! Losses over model outputs and captured activations.
//!
//! Every loss is a mean over the batch and is computed in one pass together
//! with its gradient seed for [`Model::backward`](super::Model::backward).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::OutputGrads;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    /// Cross-entropy plus `beta * mean KL(softmax(a) || uniform)` on the
    /// activation `a` of `layer`.
    Fedmax {
        #[serde(default = "default_beta")]
        beta: f64,
        layer: String,
    },
    /// `alpha * CE(hard) + (1 - alpha) * T^2 * KL(softmax(t/T) || softmax(s/T))`.
    Kd { temperature: f64, alpha: f64 },
    /// Mean squared error between the activation of `layer` and a target tensor.
    ActivationMatch { layer: String },
}

fn default_beta() -> f64 {
    1.0
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Fedmax { beta, .. } if !(*beta >= 0.0 && beta.is_finite()) => {
                Err(Error::InvalidLoss(format!("fedmax beta must be >= 0, got {beta}")))
            }
            LossSpec::Kd { temperature, alpha } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    Err(Error::InvalidLoss(format!(
                        "kd temperature must be > 0, got {temperature}"
                    )))
                } else if !(0.0..=1.0).contains(alpha) {
                    Err(Error::InvalidLoss(format!("kd alpha must be in [0, 1], got {alpha}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Layer whose activation the loss reads, if any.
    pub fn capture_layer(&self) -> Option<&str> {
        match self {
            LossSpec::Fedmax { layer, .. } | LossSpec::ActivationMatch { layer } => Some(layer),
            _ => None,
        }
    }
}

/// What a loss is measured against.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub labels: Option<&'a [usize]>,
    pub teacher_logits: Option<&'a Tensor>,
    pub activations: Option<&'a Tensor>,
}

impl<'a> Targets<'a> {
    pub fn labels(labels: &'a [usize]) -> Self {
        Targets {
            labels: Some(labels),
            teacher_logits: None,
            activations: None,
        }
    }

    pub fn teacher(logits: &'a Tensor) -> Self {
        Targets {
            labels: None,
            teacher_logits: Some(logits),
            activations: None,
        }
    }

    pub fn activations(acts: &'a Tensor) -> Self {
        Targets {
            labels: None,
            teacher_logits: None,
            activations: Some(acts),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub seed: OutputGrads,
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// `KL(p || q)` for probability vectors given as log-probabilities.
pub fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// `KL(softmax(a) || uniform)` and its gradient with respect to `a`.
pub fn kl_to_uniform(a: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(a);
    let c = a.len() as f64;
    let neg_entropy: f64 = lp.iter().map(|&l| l.exp() * l).sum();
    let value = neg_entropy + c.ln();
    let grad = lp.iter().map(|&l| l.exp() * (l - neg_entropy)).collect();
    (value, grad)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy; accumulates `scale * dCE/dlogits` into `grad`.
fn cross_entropy(logits: &Tensor, labels: &[usize], scale: f64, grad: &mut [f64]) -> Result<f64> {
    let n = logits.batch();
    let c = logits.item_len();
    check_labels(labels, n, c)?;
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().zip(labels).enumerate() {
        let lp = log_softmax(row);
        total -= lp[y];
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, l) in lp.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            g[j] += scale * (l.exp() - target) / n as f64;
        }
    }
    Ok(total / n as f64)
}

/// Computes the loss value and the gradient seed for backward.
pub fn loss_and_grad(
    spec: &LossSpec,
    outputs: &Tensor,
    captured: &BTreeMap<String, Tensor>,
    targets: Targets<'_>,
) -> Result<LossGrad> {
    spec.validate()?;
    let n = outputs.batch();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut dout = vec![0.0; outputs.len()];
    let mut dcap = BTreeMap::new();
    let need_labels = || {
        targets
            .labels
            .ok_or_else(|| Error::InvalidLoss("this loss needs integer labels".into()))
    };
    let value = match spec {
        LossSpec::CrossEntropy => cross_entropy(outputs, need_labels()?, 1.0, &mut dout)?,
        LossSpec::Fedmax { beta, .. } if *beta == 0.0 => {
            cross_entropy(outputs, need_labels()?, 1.0, &mut dout)?
        }
        LossSpec::Fedmax { beta, layer } => {
            let ce = cross_entropy(outputs, need_labels()?, 1.0, &mut dout)?;
            let a = captured
                .get(layer)
                .ok_or_else(|| Error::MissingCapture(layer.clone()))?;
            let mut da = vec![0.0; a.len()];
            let w = a.item_len();
            let mut reg = 0.0;
            for (i, row) in a.rows().enumerate() {
                let (kl, g) = kl_to_uniform(row);
                reg += kl;
                for (d, gv) in da[i * w..(i + 1) * w].iter_mut().zip(g) {
                    *d = beta * gv / n as f64;
                }
            }
            dcap.insert(layer.clone(), Tensor::new(a.shape().to_vec(), da)?);
            ce + beta * reg / n as f64
        }
        LossSpec::Kd { temperature, alpha } => {
            let t = *temperature;
            let teacher = targets
                .teacher_logits
                .ok_or_else(|| Error::InvalidLoss("kd needs teacher logits".into()))?;
            if teacher.shape() != outputs.shape() {
                return Err(Error::ShapeMismatch {
                    expected: outputs.shape().to_vec(),
                    actual: teacher.shape().to_vec(),
                });
            }
            let hard = if *alpha > 0.0 {
                alpha * cross_entropy(outputs, need_labels()?, *alpha, &mut dout)?
            } else {
                0.0
            };
            let c = outputs.item_len();
            let mut kl_total = 0.0;
            for (i, (s, tl)) in outputs.rows().zip(teacher.rows()).enumerate() {
                let ls = log_softmax(&s.iter().map(|v| v / t).collect::<Vec<_>>());
                let lt = log_softmax(&tl.iter().map(|v| v / t).collect::<Vec<_>>());
                kl_total += kl_from_logs(&lt, &ls);
                let g = &mut dout[i * c..(i + 1) * c];
                for j in 0..c {
                    g[j] += (1.0 - alpha) * t * (ls[j].exp() - lt[j].exp()) / n as f64;
                }
            }
            hard + (1.0 - alpha) * t * t * kl_total / n as f64
        }
        LossSpec::ActivationMatch { layer } => {
            let a = captured
                .get(layer)
                .ok_or_else(|| Error::MissingCapture(layer.clone()))?;
            let target = targets
                .activations
                .ok_or_else(|| Error::InvalidLoss("activation_match needs target activations".into()))?;
            if target.shape() != a.shape() {
                return Err(Error::ShapeMismatch {
                    expected: a.shape().to_vec(),
                    actual: target.shape().to_vec(),
                });
            }
            let m = a.len() as f64;
            let mut da = vec![0.0; a.len()];
            let mut total = 0.0;
            for (k, (&x, &y)) in a.data().iter().zip(target.data()).enumerate() {
                let d = x - y;
                total += d * d;
                da[k] = 2.0 * d / m;
            }
            dcap.insert(layer.clone(), Tensor::new(a.shape().to_vec(), da)?);
            total / m
        }
    };
    let dout_zero = matches!(spec, LossSpec::ActivationMatch { .. });
    Ok(LossGrad {
        value,
        seed: OutputGrads {
            outputs: (!dout_zero).then(|| Tensor::new(outputs.shape().to_vec(), dout)).transpose()?,
            captured: dcap,
        },
    })
}

/// Scalar loss value.
pub fn compute_loss(
    spec: &LossSpec,
    outputs: &Tensor,
    captured: &BTreeMap<String, Tensor>,
    targets: Targets<'_>,
) -> Result<f64> {
    Ok(loss_and_grad(spec, outputs, captured, targets)?.value)
}
