//! Dual-generator point cloud completion.

pub mod autodiff;
pub mod config;
pub mod cloud;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod latent;
pub mod model;
pub mod objectives;
mod pointops;
pub mod refine;
pub mod stylegan;
pub mod trainer;

pub use cloud::{PointCloud, RigidTransform};
pub use error::{Error, Result};
