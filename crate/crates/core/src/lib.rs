//! Desk-scale workbench for network-centric deep learning at the edge:
//! federated training with an activation-entropy regularizer, data-free
//! distillation from teacher activation metadata, and communication-aware
//! distributed inference built from community-partitioned student ensembles.

pub mod datasets;
pub mod distsim;
pub mod dream;
pub mod error;
pub mod fed;
pub mod io;
pub mod nn;
pub mod nonn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
