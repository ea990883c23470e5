//! Neighbor mining, second-order cleaning and clustering-head training on
//! precomputed embeddings, with evaluation and a k-means baseline.

pub mod baselines;
pub mod embed_store;
pub mod error;
pub mod head;
pub mod knn;
pub mod metrics;
pub mod neighbor_graph;
pub mod trainer;

pub use embed_store::{EmbeddingSet, MixtureParams, SplitSpec};
pub use error::{Error, Result};
pub use head::{HeadKind, HeadParams, LossWeights};
pub use metrics::MetricsReport;
pub use neighbor_graph::{NeighborIndex, SupervisionConfig};
pub use trainer::{train, TrainConfig};
