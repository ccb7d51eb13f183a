//! capstrace: capsule-network semantic segmentation with analytic traceback.
//!
//! The crate is a self-contained micro-framework: dense `f64` tensors, a
//! reverse-mode autodiff tape, spatial layers, capsule layers with dynamic
//! routing, the traceback pipeline that turns routing coefficients into
//! per-position class probabilities, losses and segmentation metrics, data
//! generation and caching, reference model builders, and a deterministic
//! trainer.  Everything stochastic flows through [`rng::SeededRng`], so runs
//! are bit-reproducible for a fixed seed.

pub mod autodiff;
pub mod capsule;
pub mod cten;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod traceback;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
