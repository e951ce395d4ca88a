//! Randomized agglomerative clustering with selective p-values at each merge.

pub mod bench;
pub mod data;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod inference;
pub mod linkage;
pub mod metrics;
pub mod quadrature;
pub mod rng;
pub mod selection;
pub mod special;

pub use error::{Error, Result};
