//! Geodesic backpropagation for calibrating cardiac activation models to ECGs.
//!
//! The pipeline runs an anisotropic eikonal solve from a set of PMJs, turns
//! the activation map into an ECG through precomputed lead-field vectors,
//! and differentiates the ECG mismatch back to PMJ positions and timings.

pub mod adjoint;
pub mod anatomy;
pub mod ecg;
pub mod eikonal;
pub mod error;
pub mod feasible;
pub mod fem;
pub mod geometry;
pub mod io;
pub mod leads;
pub mod mesh;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod velocity;

pub use error::{Error, Result};
