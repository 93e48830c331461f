//! Differentiable point-and-tri-plane neural field engine.
//!
//! The engine renders expression-driven head-avatar style scenes by fusing
//! two feature spaces at every ray sample: a canonical tri-plane field and a
//! dynamic point-based expression field carried by a deforming point cloud.
//! Multiple tri-plane sources are merged by a learnable attention module.
//! All trainable math runs through a minimal reverse-mode tape in 64-bit
//! floats, verified end to end by central finite differences, and fitting is
//! exercised at desk scale against an analytic oracle scene.

pub mod adam;
pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod error;
pub mod expr_field;
pub mod image_io;
pub mod kernels;
pub mod objectives;
pub mod oracle;
pub mod knn;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod camera;
pub mod render;
pub mod points;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod triplane;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
