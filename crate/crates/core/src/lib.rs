//! Entity-hop retrieval for multi-hop questions.
//!
//! A first-pass retriever (BM25 or Dirichlet query likelihood) returns an
//! initial passage set. Entity mentions in those passages are linked through
//! an alias table to the passages describing the entities, producing
//! length-2 chains `(D, E)` plus a self-link `(D, D)` for every initial
//! passage. A small feed-forward network over query-aware passage vectors
//! scores each chain, and passages are ranked by their best chain.
//!
//! The crate also carries the classical baselines (BM25, query likelihood,
//! Rocchio and RM3 pseudo-relevance feedback, pointwise re-ranking), the
//! all-supporting-passages metrics, and a synthetic bridge-entity corpus
//! generator used for end-to-end checks.

pub mod chains;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod linker;
pub mod pipeline;
pub mod prf;
pub mod reranker;
pub mod synth;

pub use error::{Error, Result};
