//! Tiered IVF retrieval with lookahead cluster prefetching, plus a
//! trace-driven simulator for multi-stage RAG pipelines.

pub mod budget;
pub mod cache;
pub mod error;
pub mod ivf;
pub mod kmeans;
pub mod pipeline;
pub mod report;
pub mod sched;
pub mod seed;
pub mod tiered;
pub mod trace;
pub mod vectorstore;

pub use error::{Error, Result};
pub use ivf::{ClusterId, IvfIndex, IvfParams};
pub use pipeline::{run_batch, run_single, RunConfig, RunRecord};
pub use tiered::{hybrid_search, TieredStore};
pub use trace::{Pipeline, QueryTrace, TraceSet};
pub use vectorstore::{exact_search, EmbeddingMatrix, Metric, Neighbor, TopK};
