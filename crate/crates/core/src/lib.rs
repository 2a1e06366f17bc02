//! Event-guided dynamic Gaussian reconstruction on the CPU.
//!
//! The crate is organized bottom-up: camera geometry, event simulation and
//! encoding, contrast maximization, the adapted flow predictor, the splatting
//! renderer with its deformation field, event-to-Gaussian association and the
//! combined supervision loop.

pub mod association;
pub mod contrast;
pub mod error;
pub mod flow;
pub mod events;
pub mod gaussian;
pub mod metrics;
pub mod supervision;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
