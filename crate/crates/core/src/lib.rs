//! Interval-bound certified training and certification for density-map
//! regression CNNs.
//!
//! The core is generic over the scalar type; the `*64` aliases fix it to
//! `f64`, which every file format stores.

pub mod bounds;
pub mod datagen;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{BtnError, Result};
pub use numerics::{IntervalTensor, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type IntervalTensor64 = IntervalTensor<f64>;
pub type MultiColumnModel64 = model::MultiColumnModel<f64>;
pub type Sequential64 = model::Sequential<f64>;
