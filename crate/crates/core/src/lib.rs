//! Blind quality assessment for very large images.
//!
//! Patches are sampled on an aspect-matched grid, encoded into feature
//! vectors, linked into a hybrid spatial/feature KNN graph and scored by a
//! residual graph network with attention pooling.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod graph;
pub mod grid;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod trainer;

pub use error::{IqaError, Result};
