//! DAWN-FM: data-aware and noise-informed flow matching for linear
//! inverse problems.
//!
//! The library trains a conditional velocity field that transports
//! Gaussian noise to the posterior of an inverse problem, conditioning
//! on an embedding of the measured data and on the noise level. It
//! ships the forward operators (Gaussian blur, parallel-beam Radon, a
//! two-number toy), a small reverse-mode autodiff engine for the
//! velocity networks, the misfit-augmented training loop, RK4 posterior
//! sampling with ensemble statistics, and the image-quality metrics
//! used to evaluate reconstructions.

pub mod data;
pub mod error;
pub mod fft;
pub mod flow;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{DawnError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
