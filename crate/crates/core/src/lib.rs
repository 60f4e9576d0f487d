//! Landmark localization with a cascade of a PCA shape-basis decoder and a
//! thin-plate-spline point transformer over a small convolutional feature
//! extractor, with hand-written gradients, staged training and PCK
//! evaluation on a synthetic deformable-shape benchmark.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod shape;
pub mod tps;
pub mod trainer;

pub use error::{DdnError, Result};
