//! Sparse reconstruction of a 3D radial-mixture density from noisy 2D
//! projections taken at unknown, uniformly random orientations.
//!
//! Each projection is deconvolved with an L1-constrained least-squares fit
//! over a grid of Gaussian base profiles ([`sparse_solver`]); the selected
//! pixels are clustered into projected component locations and weights
//! ([`profile_estimation`]); the projected Gram matrices are averaged and
//! inverted into a 3D Gram matrix ([`shape_recovery`]); and the mixture is
//! assembled, fitted and evaluated ([`reconstruction`]).

pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod mixture;
pub mod pipeline;
pub mod profile_estimation;
pub mod reconstruction;
pub mod rng;
pub mod shape_recovery;
pub mod sparse_solver;

pub use error::{Error, Result};
