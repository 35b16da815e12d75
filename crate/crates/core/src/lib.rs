//! Spatially smoothed two-groups feature selection on 3D voxel lattices.
//!
//! The crate computes voxelwise z-scores, fits a two-groups model with an
//! empirical null, and estimates voxel-specific non-null priors by EM with a
//! fused-lasso M-step whose penalty differs between the `z <= 0` side, the
//! `z > 0` side and the edges bridging them.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod fdrhs;
pub mod genlasso;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod sparse;
pub mod stats;
pub mod voxelgrid;

pub use error::{Error, Result};
