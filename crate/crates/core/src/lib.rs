//! Agglomerative adaptive anisotropic mean-shift clustering.

// NaN must fail positivity checks, hence `!(x > 0.0)` rather than `x <= 0.0`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agglomerator;
pub mod baselines;
pub mod bandwidth;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod partition;
pub mod postprocess;
pub mod synth;
pub mod updates;

pub use agglomerator::{run, run_with_observer, RunConfig, RunResult};
pub use dataset::{PixelGrid, PointStore};
pub use error::{Error, Result};
pub use geometry::{Bandwidth, Domains, KernelProfile, SpdMatrix};
pub use partition::Partition;
