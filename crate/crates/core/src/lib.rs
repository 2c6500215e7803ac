//! Differentiable Gaussian splatting with score-distillation guidance,
//! body-model initialization and adaptive density control.

pub mod body;
pub mod cloud;
pub mod config;
pub mod density;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod image;
pub mod optim;
pub mod ply;
pub mod raster;

pub use cloud::{CloudGradients, GaussianCloud, RawGaussian};
pub use error::{Error, PlyError, Result};
pub use geometry::{Camera, Rotation};
pub use raster::{render, render_backward, Adjoint, RenderOutput, RenderSettings};
