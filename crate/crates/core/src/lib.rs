//! Probabilistic prediction of subspace-valued maps over a parameter space,
//! with leave-one-out model selection, a tangent-space interpolation
//! baseline, and a reduced-order-modeling benchmark harness.
//!
//! The typical workflow:
//!
//! 1. collect parameter points and one orthonormal basis per point,
//! 2. pick or tune a correlation kernel ([`model_selection`]),
//! 3. fit a [`gps::GpsModel`] and predict factored subspace distributions at
//!    new parameter points,
//! 4. optionally compare against tangent-space interpolation ([`baseline`])
//!    or drive the reduced-order-modeling harness ([`prom`]).
//!
//! All numerical code is generic over the scalar type ([`scalar::Real`],
//! `f32` or `f64`); the aliases at the crate root fix `f64`, which is what
//! the CLI and the file formats use.

pub mod baseline;
pub mod error;
pub mod gps;
pub mod grassmann;
pub mod io;
pub mod kernel;
mod linalg;
pub mod model_selection;
pub mod prom;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision orthonormal basis of a subspace.
pub type StiefelBasis = grassmann::StiefelBasis<f64>;
/// Double-precision horizontal tangent vector.
pub type TangentVector = grassmann::TangentVector<f64>;
/// Double-precision kernel specification.
pub type KernelSpec = kernel::KernelSpec<f64>;
/// Double-precision parameter point.
pub type ParameterPoint = kernel::ParameterPoint<f64>;
/// Double-precision fitted model.
pub type GpsModel = gps::GpsModel<f64>;
/// Double-precision factored predictive distribution.
pub type PredictiveSubspace = gps::PredictiveSubspace<f64>;
