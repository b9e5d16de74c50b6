//! Gaussian avatars bound to the triangles of a parametric skinned rig.
//!
//! The forward pass poses the rig, builds a rigid frame per triangle, maps
//! each triangle-local Gaussian into world space and splats the result with
//! a differentiable tile rasterizer. Training optimizes only the Gaussians'
//! local parameters; there are no learned deformation modules.

pub mod ablate;
pub mod binding;
pub mod container;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod imaging;
pub mod loss;
pub mod math;
pub mod optim;
pub mod raster;
pub mod rig;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
