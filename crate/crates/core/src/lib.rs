//! Spatial Monte Carlo dropout engine.
//!
//! Plain fp64 CNN building blocks with backward passes ([`tensor`]), dropout
//! masks and the fused dropout–convolution path ([`stochastic`]), model graphs
//! with vanilla / sequential-MCDO / branched-MCDO / deep-ensemble executors
//! ([`graph`]), desk-scale training ([`train`]), calibration metrics and image
//! corruptions ([`eval`]), dataset ingestion ([`data`]) and a latency harness
//! ([`bench`]).

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod stochastic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
