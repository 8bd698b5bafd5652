//! Dense bi-encoder candidate generation for zero-shot entity linking.
//!
//! Mentions and entity descriptions are templated into special-token
//! sequences, encoded by two independent transformer encoders, pooled into
//! single vectors, trained with in-batch negatives, and retrieved by exact
//! top-K search under dot, cosine or euclidean similarity.

pub mod bpe;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod pooling;
pub mod retrieval;
pub mod synthetic;
pub mod template;
pub mod train;

pub use error::{Error, Result};
