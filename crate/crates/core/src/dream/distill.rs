//! Knowledge distillation of a student from teacher soft labels on synthetic inputs.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::fed::evaluate;
use crate::nn::{build_model, fit, predict_batched, LossSpec, Model, ModelSpec, TrainConfig, TrainData};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    /// Accuracy on a held-out real set, when one was supplied.
    pub test_accuracy: Option<f64>,
    pub test_macro_f1: Option<f64>,
}

/// Trains a fresh `student_spec` model on the teacher's logits over `inputs`.
/// Only label-free distillation is allowed: `loss` must be `kd` with `alpha = 0`.
pub fn distill(
    teacher: &Model,
    student_spec: &ModelSpec,
    inputs: &Tensor,
    loss: &LossSpec,
    train: &TrainConfig,
    seed: u64,
    test: Option<&LabeledDataset>,
) -> Result<(Model, DistillReport)> {
    match loss {
        LossSpec::Kd { alpha, .. } if *alpha == 0.0 => {}
        LossSpec::Kd { alpha, .. } => {
            return Err(Error::InvalidLoss(format!(
                "distillation without real labels requires alpha = 0, got {alpha}"
            )))
        }
        other => return Err(Error::InvalidLoss(format!("distillation needs a kd loss, got {other:?}"))),
    }
    if inputs.shape().is_empty() || inputs.batch() == 0 {
        return Err(Error::InvalidArgument("no distillation inputs".into()));
    }
    let teacher_logits = predict_batched(teacher, inputs, 256)?;
    let mut student = build_model(student_spec, seed)?;
    let epoch_losses = fit(&mut student, &TrainData::distill(inputs, &teacher_logits), loss, train, seed)?;
    let eval = test.map(|t| evaluate(&student, t)).transpose()?;
    Ok((
        student,
        DistillReport {
            epoch_losses,
            samples: inputs.batch(),
            test_accuracy: eval.map(|e| e.accuracy),
            test_macro_f1: eval.map(|e| e.macro_f1),
        },
    ))
}
