//! Surface light-field regularisation for radiance fields.
//!
//! The crate is organised bottom-up:
//!
//! - [`sphere`]: deterministic Fibonacci lattice on the sphere, unit-ball shells and
//!   uniform random rotations.
//! - [`geometry`]: conical-frustum Gaussians, their 3D lift and virtual rays about a
//!   surface point.
//! - [`field`] and [`scene`]: the trainable trilinear grid field and analytic
//!   ground-truth scenes.
//! - [`render`] and [`metrics`]: quadrature volume rendering, first-surface selection
//!   and evaluation metrics.
//! - [`regularizers`]: spatial/directional batches and the four surface losses.
//! - [`curriculum`] and [`train`]: the staircase schedule and the training loop.
//! - [`config`], [`io`] and [`experiment`]: configuration files, on-disk formats and
//!   paired treatment/control experiments.

pub mod config;
pub mod curriculum;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod regularizers;
pub mod render;
pub mod scene;
pub mod sphere;
pub mod train;

pub use error::{Error, Result};

/// 3-vector used throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix used for rotations and covariances.
pub type Mat3 = nalgebra::Matrix3<f64>;
