//! Graph Laplacian learning with certified adversarial robustness.

pub mod attack;
pub mod certify;
pub mod classify;
pub mod config;
pub mod data;
pub mod defend;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod pipeline;
pub mod plot;
pub mod quad;
pub mod record;
pub mod rng;
pub mod solve;
pub mod spatial;
pub mod stats;

pub use error::{GlError, Result};
