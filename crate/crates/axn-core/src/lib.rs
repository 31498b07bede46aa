//! Budgeted approximate k-NN search with an expensive black-box similarity
//! function.
//!
//! The similarity oracle (e.g. a neural cross-encoder) is treated as a pure
//! black box that maps a (query, item) pair to a scalar score, with a hard
//! per-query budget on the number of calls. This crate provides:
//!
//! - an offline indexing stage that fits item embeddings by factorizing a
//!   sparse matrix of observed scores ([`gbuilder`], [`factorize`]), and
//! - an online stage that searches under the call budget, refitting the query
//!   embedding each round by least squares on the exact scores gathered so
//!   far ([`retrieve`]),
//!
//! plus baselines (retrieve-and-rerank, gradient-update refinement, exact
//! brute force) and an evaluation harness ([`evalharness`]) that measures
//! Top-k-Recall against brute-force gold labels on seeded synthetic
//! benchmarks.

pub mod error;
pub mod ids;
pub mod matrix;
pub mod rng;
pub mod sparse;
pub mod topk;

pub mod scorer;

pub mod gbuilder;

pub mod linalg;

pub mod factorize;

pub mod retrieve;

pub mod evalharness;

pub use error::{Error, Result};
pub use ids::{ItemId, QueryId};
pub use matrix::{EmbeddingMatrix, EmbeddingRole};
pub use sparse::SparseScoreMatrix;
pub use topk::TopKList;
