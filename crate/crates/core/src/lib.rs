//! Exposure-debiased matrix factorization for implicit feedback.
//!
//! Observed feedback is modelled as relevance times exposure. The crate
//! provides the naive, inverse-propensity and low-variance unbiased training
//! losses, a learned exposure model, and a bi-level trainer that fits the
//! exposure parameters through an exact one-step hypergradient against a
//! small validation set whose exposure is taken to be 1.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod bilevel;
pub mod checks;
pub mod data;
pub mod error;
pub mod estimators;
pub mod exposure;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model = model::FactorModel<f64>;
pub type Exposure = exposure::ExposureParams<f64>;
pub type Popularity = exposure::PopularityTable<f64>;
pub type GroundTruth = data::SyntheticGroundTruth<f64>;
