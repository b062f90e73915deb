//! Essay grading with a collaborative network of a recursive structure
//! branch, a convolutional idea branch and an LSTM/dense fusion head, plus
//! classical baselines, ASAP ingestion and evaluation metrics.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod rvnn;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod tfidf;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Half-width of the uniform range used to initialize every weight.
pub const INIT_BOUND: f64 = 0.08;
