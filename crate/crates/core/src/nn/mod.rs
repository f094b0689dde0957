//! Minimal dense/convolutional network engine with reverse-mode
//! differentiation, losses, SGD and exact parameter/FLOP accounting.

pub mod count;
pub mod gradcheck;
pub mod loss;
pub mod model;
mod ops;
pub mod optim;
pub mod spec;
pub mod train;
pub mod zoo;

pub use count::{count_flops, count_params, per_layer_flops, per_layer_params};
pub use loss::{compute_loss, loss_and_grad, LossGrad, LossSpec, Targets};
pub use model::{build_model, ForwardResult, Gradients, Model, OutputGrads, ParamSlot, Tape};
pub use optim::{sgd_step, sgd_update, SgdConfig, SgdState};
pub use spec::{LayerKind, LayerSpec, ModelSpec, Shape};
pub use train::{capture_batched, fit, predict_batched, TrainConfig, TrainData};
