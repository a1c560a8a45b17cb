//! Fitting a rigged blendshape head to probabilistic dense 2D landmarks.
//!
//! The pipeline: a [`face_model`] generates posed vertices, [`camera`]
//! projects them, [`energy`] turns observations and priors into residual
//! blocks with static sparsity, and [`solver`] minimizes the total with
//! Levenberg-Marquardt.

pub mod bench;
pub mod camera;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod face_model;
pub mod io;
pub mod landmarks;
pub mod layout;
pub mod math;
pub mod metrics;
pub mod priors;
pub mod rng;
pub mod scenario;
pub mod solver;
pub mod workers;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
