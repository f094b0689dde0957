//! Network of neural networks: split a teacher's final-layer filters into
//! communities, train one small student per community and fuse their
//! features.

pub mod ensemble;
pub mod graph;
pub mod louvain;
pub mod train;

pub use ensemble::{
    fusion_spec, group_communities, make_partitions, EnsembleConfig, StudentEnsembleSpec, StudentPlan, StudentTemplate,
    FEATURE_LAYER,
};
pub use graph::{build_filter_graph, edge_weights, filter_importances, final_conv_layer, Edge, EdgeRule, FilterGraph};
pub use louvain::{canonical, louvain, modularity, modularity_dense, PartitionResult};
pub use train::{
    ensemble_infer, ensemble_infer_each, evaluate_ensemble, fuse, student_features, train_students, Ensemble, EnsembleOutput, NonnReport,
    NonnTrainConfig,
};
