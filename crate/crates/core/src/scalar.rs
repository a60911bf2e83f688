//! Scalar abstraction. Every numerical routine in this crate is generic over
//! [`Real`]; the crate root exports `f64`-concrete aliases for the common case.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar accepted by all routines in this crate.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {
    /// Conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal")
    }

    /// Round-trip to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A tolerance stated for double precision, rescaled to the precision of `T`.
///
/// The exponent of the tolerance is scaled by the ratio of machine-epsilon
/// exponents, so `tol::<f64>(1e-10) == 1e-10` while `tol::<f32>(1e-10)` is a
/// comparably strict bound (~4e-5) for single precision.
pub fn tol<T: Real>(base: f64) -> T {
    let eps_t = T::default_epsilon().as_f64();
    T::of(base.powf(eps_t.ln() / f64::EPSILON.ln()))
}
