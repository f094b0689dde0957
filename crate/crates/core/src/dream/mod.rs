//! Data-free distillation: summarize teacher activations as per-class cluster
//! metadata, synthesize inputs that reproduce sampled activations, and distill
//! a student on those inputs alone.

pub mod distill;
pub mod kmeans;
pub mod metadata;
pub mod pca;
pub mod synth;

pub use distill::{distill, DistillReport};
pub use kmeans::{kmeans_fit, KMeans};
pub use metadata::{avgpool_layer, extract_metadata, Cluster, Components, ExtractConfig, Metadata};
pub use pca::{pca_fit, pca_fit_explained, Pca};
pub use synth::{dream_trajectory, generate_dreams, generate_dreams_from, generate_targets, DreamBatch, DreamConfig, DreamInit, Targets};
