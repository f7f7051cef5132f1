//! Spatio-temporal deep-kernel Gaussian-process sound-field estimation.
//!
//! A SIREN feature map warps spacetime before a squared-exponential kernel;
//! the kernel is learned from microphone data by marginal likelihood,
//! optionally regularized by pseudo-observations `Lu = 0` of the homogeneous
//! wave equation at random collocation points.
//!
//! Module map:
//! - [`linalg`]: Cholesky, solves, log-determinants
//! - [`autodiff`]: order-2 jets and a reverse-mode tape
//! - [`featurenet`]: the SIREN feature map
//! - [`kernels`]: deep kernel, wave-operator covariance blocks, diffuse baseline
//! - [`gp`]: posterior inference and the training objectives
//! - [`model`]: parameter vector plus objective/gradient evaluation
//! - [`trainer`]: Adam loop with collocation resampling
//! - [`acoustics`]: image-source room simulation
//! - [`experiment`]: configuration, NMSE evaluation and reports

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acoustics;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod featurenet;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use featurenet::{SirenConfig, SirenParams};
pub use gp::{CollocationRegion, CollocationSet, Dataset};
pub use kernels::{KernelHyper, WaveOperator};
pub use linalg::{CholeskyFactor, DenseMatrix};
pub use model::{DiffuseModel, ModelParams};
pub use trainer::{TrainConfig, TrainState};

/// A point in space (meters) and time (seconds).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpacetimePoint {
    pub r: [f64; 3],
    pub t: f64,
}

impl SpacetimePoint {
    pub fn new(r: [f64; 3], t: f64) -> Self {
        SpacetimePoint { r, t }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.r[0], self.r[1], self.r[2], self.t]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        SpacetimePoint { r: [c[0], c[1], c[2]], t: c[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }
}
