//! Seeded minibatch SGD loop shared by every pipeline.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, LossSpec, Targets};
use super::model::Model;
use super::optim::{sgd_step, SgdConfig, SgdState};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

/// Training examples and whatever targets the loss needs.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub inputs: &'a Tensor,
    pub labels: Option<&'a [usize]>,
    pub teacher_logits: Option<&'a Tensor>,
    pub target_activations: Option<&'a Tensor>,
}

impl<'a> TrainData<'a> {
    pub fn labeled(inputs: &'a Tensor, labels: &'a [usize]) -> Self {
        TrainData {
            inputs,
            labels: Some(labels),
            teacher_logits: None,
            target_activations: None,
        }
    }

    pub fn distill(inputs: &'a Tensor, teacher_logits: &'a Tensor) -> Self {
        TrainData {
            inputs,
            labels: None,
            teacher_logits: Some(teacher_logits),
            target_activations: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `cfg.epochs` passes of minibatch SGD. Epoch `e` shuffles with the
/// stream `(seed, e)`. Returns the mean training loss of each epoch.
pub fn fit(
    model: &mut Model,
    data: &TrainData<'_>,
    loss: &LossSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    loss.validate()?;
    cfg.sgd.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n = data.len();
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let capture: BTreeSet<String> = loss.capture_layer().map(str::to_string).into_iter().collect();
    let mut state = SgdState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(seed, &[epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = data.inputs.select(idx);
            let labels: Option<Vec<usize>> = data
                .labels
                .map(|l| idx.iter().map(|&i| l[i]).collect());
            let teacher = data.teacher_logits.map(|t| t.select(idx));
            let acts = data.target_activations.map(|t| t.select(idx));
            let fwd = model.forward(&x, &capture)?;
            let targets = Targets {
                labels: labels.as_deref(),
                teacher_logits: teacher.as_ref(),
                activations: acts.as_ref(),
            };
            let lg = loss_and_grad(loss, &fwd.outputs, &fwd.captured, targets)?;
            if !lg.value.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            total += lg.value * idx.len() as f64;
            let grads = model.backward(&fwd.tape, &lg.seed)?;
            sgd_step(model, &grads.params, &cfg.sgd, &mut state)?;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Forward pass in fixed-size chunks; returns the concatenated outputs.
pub fn predict_batched(model: &Model, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = inputs.batch();
    let idx: Vec<usize> = (0..n).collect();
    let mut data = Vec::new();
    let mut width = model.output_shape().iter().product::<usize>();
    for part in idx.chunks(chunk.max(1)) {
        let out = model.predict(&inputs.select(part))?;
        width = out.item_len();
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(model.output_shape());
    debug_assert_eq!(data.len(), n * width);
    Tensor::new(shape, data)
}

/// Activations of one layer over a dataset, computed in chunks.
pub fn capture_batched(model: &Model, inputs: &Tensor, layer: &str, chunk: usize) -> Result<Tensor> {
    let shape_tail = model
        .layer_output_shape(layer)
        .ok_or_else(|| Error::MissingCapture(layer.to_string()))?
        .to_vec();
    let capture: BTreeSet<String> = [layer.to_string()].into();
    let n = inputs.batch();
    let idx: Vec<usize> = (0..n).collect();
    let mut data = Vec::new();
    for part in idx.chunks(chunk.max(1)) {
        let mut fwd = model.forward(&inputs.select(part), &capture)?;
        let t = fwd.captured.remove(layer).expect("requested capture");
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&shape_tail);
    Tensor::new(shape, data)
}
