//! Graph-based clustering of cell embeddings and the metrics used to score
//! a clustering against known cell types.

mod error;
mod knn;
mod leiden;
mod metrics;
mod partition;

pub use error::ClusterError;
pub use knn::{build_knn, Graph, KnnGraph};
pub use leiden::{leiden_cluster, modularity, LeidenParams, LeidenResult};
pub use metrics::{
    calinski_harabasz, davies_bouldin, evaluate, information_metrics, pair_counting_metrics, silhouette,
    InformationMetrics, MetricReport, PairMetrics,
};
pub use partition::Partition;

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;
