//! Hyperbolic spatio-temporal transformer for anomaly detection in point
//! cloud videos.
//!
//! Frames are encoded by a shared per-point network with max pooling,
//! lifted onto the Lorentz hyperboloid, mixed over time by curvature-aware
//! attention, and scored by the Lorentzian distance between the predicted
//! and the observed next-frame embedding.

pub mod anomaly;
mod binio;
pub mod data;
pub mod error;
pub mod encoder;
pub mod engine;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Mat;
