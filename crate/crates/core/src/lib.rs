//! Plan-aware dual-encoder reward model over precomputed embeddings.

pub mod embedding;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rerank;
pub mod store;
pub mod synthetic;
pub mod trainer;
