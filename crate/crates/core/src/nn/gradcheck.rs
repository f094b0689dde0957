//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! Only forward evaluations are used here, so the oracle shares no code
//! with [`Model::backward`](super::Model::backward).

use std::collections::BTreeSet;

use super::loss::{compute_loss, LossSpec, Targets};
use super::model::Model;
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn central_differences<F>(x: &mut [f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x)?;
        x[i] = orig - eps;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

fn loss_at(model: &Model, inputs: &Tensor, loss: &LossSpec, targets: Targets<'_>) -> Result<(f64, u64)> {
    let capture: BTreeSet<String> = loss.capture_layer().map(str::to_string).into_iter().collect();
    let fwd = model.forward(inputs, &capture)?;
    let value = compute_loss(loss, &fwd.outputs, &fwd.captured, targets)?;
    Ok((value, fwd.tape.relu_pattern(model.spec())))
}

/// Central differences that also report whether either probe crossed a ReLU
/// kink. A crossing makes the quotient meaningless, so such coordinates come
/// back as `None`.
fn kink_aware_differences<F>(x: &mut [f64], eps: f64, mut f: F) -> Result<Vec<Option<f64>>>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    let (_, base) = f(x)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let mut probe = |offset: f64| {
            x[i] = orig + offset;
            f(x)
        };
        let (plus, k1) = probe(eps)?;
        let (minus, k2) = probe(-eps)?;
        x[i] = orig;
        out.push((k1 == base && k2 == base).then(|| (plus - minus) / (2.0 * eps)));
    }
    Ok(out)
}

/// Numeric gradient of the loss with respect to every parameter.
pub fn numeric_param_grad(
    model: &Model,
    inputs: &Tensor,
    loss: &LossSpec,
    targets: Targets<'_>,
    eps: f64,
) -> Result<Vec<Option<f64>>> {
    let mut probe = model.clone();
    let mut params = model.params().to_vec();
    kink_aware_differences(&mut params, eps, |p| {
        probe.params_mut().copy_from_slice(p);
        loss_at(&probe, inputs, loss, targets)
    })
}

/// Numeric gradient of the loss with respect to the input batch.
pub fn numeric_input_grad(
    model: &Model,
    inputs: &Tensor,
    loss: &LossSpec,
    targets: Targets<'_>,
    eps: f64,
) -> Result<Vec<Option<f64>>> {
    let mut x = inputs.data().to_vec();
    let shape = inputs.shape().to_vec();
    kink_aware_differences(&mut x, eps, |v| {
        let t = Tensor::new(shape.clone(), v.to_vec())?;
        loss_at(model, &t, loss, targets)
    })
}

/// Comparison of an analytic gradient against kink-aware numeric estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
    pub compared: usize,
    pub skipped_kinks: usize,
}

pub fn compare(analytic: &[f64], numeric: &[Option<f64>], floor: f64) -> GradCheck {
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        compared: 0,
        skipped_kinks: 0,
    };
    for (i, (&a, n)) in analytic.iter().zip(numeric).enumerate() {
        match n {
            Some(n) => {
                out.compared += 1;
                let e = rel_error(a, *n, floor);
                if out.worst.is_none() || e > out.max_rel_error {
                    out.max_rel_error = e;
                    out.worst = Some((i, a, *n));
                }
            }
            None => out.skipped_kinks += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_of_a_cubic() {
        let mut x = vec![1.0, -2.0];
        let g = central_differences(&mut x, 1e-5, |v| Ok(v[0].powi(3) + 2.0 * v[1])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
        assert_eq!(x, vec![1.0, -2.0]);
    }
}
