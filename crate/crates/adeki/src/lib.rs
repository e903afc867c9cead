//! Sequential Bayesian experimental design with differentiable ensemble
//! Kalman inversion, exercised on a two-dimensional convection-diffusion
//! source-inversion testbed. The crate provides the explicit PDE solver and
//! its exact transpose, bilinear point observations, ensemble Kalman updates
//! with reverse-mode design gradients, a dense grid posterior over source
//! locations, a small source-correction network, and the alternating
//! design/inference loop that ties them together.

pub mod error;
pub mod grid;
pub mod rngutil;
pub mod metrics;
pub mod solver;
pub mod observe;
pub mod net;
pub mod eki;
pub mod mem;
pub mod ad;
pub mod bayes;
pub mod hybrid;
pub mod model;

pub use error::{Error, Result};
