//! Graph trend filtering for implicit-feedback collaborative filtering.
//!
//! The crate builds a user-item bipartite graph, filters embeddings with an
//! ℓ1 graph trend filtering objective solved by a primal-dual iteration,
//! trains the input embeddings with BPR loss through the filter, and
//! evaluates full-ranking Recall/NDCG, robustness and sparsity.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod filter;
pub mod graph;
pub mod training;

pub use error::{Error, Result};
