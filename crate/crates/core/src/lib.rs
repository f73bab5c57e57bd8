//! Hash-keyed n-gram memory ("engram") inside a causal token-grid
//! transformer, with the probes used to tell content retrieval apart from a
//! gated side-pathway: stratified n-gram Jaccard analysis, gate clamping,
//! donor probes, backbone-ratio accounting and frozen-noise training.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod engram;
pub mod error;
pub mod hashing;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
