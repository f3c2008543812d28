//! A lifelong editor for vision-language models: per-edit low-rank experts
//! produced by a generator, stored in a growing repository, and selected at
//! inference by hard (sentinel-thresholded) and soft (weighted) routing.
//! Everything runs on a small synthetic vision-language surrogate.

pub mod benchmark;
pub mod config;
pub mod editor;
pub mod error;
pub mod generator;
pub mod numerics;
pub mod params;
pub mod repository;
pub mod routing;
pub mod scalar;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
pub use scalar::Scalar;

/// Default precision used by the CLI and the benchmark.
pub type Real = f32;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Surrogate32 = surrogate::Surrogate<f32>;
pub type Editor32 = editor::Editor<f32>;
pub type Repository32 = repository::Repository<f32>;
