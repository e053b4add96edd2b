//! Frequency-enhanced feature fusion for small-object detection.
//!
//! Every numeric kernel is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types the harness trains with.

pub mod boxes;
pub mod checks;
pub mod error;
pub mod freq;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod scenes;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Value, Var};
pub use params::{Bound, ParamStore};
pub use scalar::Scalar;
pub use spectral::Spectrum;
pub use tensor::{Shape, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Spectrum64 = Spectrum<f64>;
