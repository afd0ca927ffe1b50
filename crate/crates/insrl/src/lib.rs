//! Multi-view relation extraction with intact-space fusion.
//!
//! Three information sources about an entity pair — the labeled sentence bag,
//! the two entity descriptions, and the two type sets — are encoded into view
//! vectors, fused into a latent "intact" representation by weighted
//! reconstruction with cross-view attention, and classified over relations.
//! A recorded-computation layer provides reverse-mode gradients checked
//! against a finite-difference oracle, and the evaluation side produces
//! held-out precision-recall curves, AUC, and max F1.
//!
//! Everything numeric is generic over the scalar type ([`Scalar`]): tests and
//! oracles run in `f64`, training may run in `f32` via configuration.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod runner;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod views;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double-precision aliases (tests, oracles).
pub type Tensor64 = Tensor<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Gradients64 = params::Gradients<f64>;

/// Single-precision aliases (training).
pub type Tensor32 = Tensor<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type Gradients32 = params::Gradients<f32>;
