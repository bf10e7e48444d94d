//! Context-aware refinement of target and aspect embeddings for targeted
//! aspect-based sentiment analysis, with a desk-scale evaluation harness.

pub mod cli;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod refiner;
pub mod rng;
pub mod selfcheck;

pub use error::{Error, Result};
