//! Joint-embedding predictive pre-training on bird's-eye-view grids.
//!
//! The pipeline runs point cloud → voxel features → BEV-guided masking →
//! context/target encoders → token replacement → predictor → cosine and
//! variance-hinge losses, with the target encoder tracking the context
//! encoder by exponential moving average. [`diagnostics`] holds the
//! occupancy-estimation, spectrum and linear-probe analyses.

pub mod bev;
pub mod config;
pub mod data;
pub mod dataset;
pub mod diagnostics;
pub mod gradsuite;
mod error;
pub mod masking;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{CoreError, Result};
