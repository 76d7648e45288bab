//! Backstepping boundary control and observer design for radially varying
//! reaction-diffusion equations on n-dimensional balls.
//!
//! Each spherical harmonic `(l, m)` of the state obeys a 1-D singular
//! parabolic equation on `r ∈ [0, 1]`. Its stabilizing boundary feedback and
//! output-injection gain come from a kernel that is computed here as an even
//! power series by a triangular recurrence ([`kernel`]). The remaining modules
//! assemble gains ([`gains`]), choose which degrees need control
//! ([`modes`]), simulate the per-harmonic closed loops ([`radial`]) and map
//! between harmonics and angular fields ([`harmonics`]). [`experiment`] ties
//! them into the multi-mode runs driven by the CLI.
//!
//! The series and kernel code is generic over [`Scalar`]; the aliases below
//! fix the common instantiations.

pub mod error;
pub mod experiment;
pub mod gains;
pub mod harmonics;
pub mod json;
pub mod kernel;
pub mod modes;
pub mod radial;
pub mod scalar;
pub mod series;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Exact rational scalar.
pub type Rational = num_rational::BigRational;

pub type EvenSeries = series::EvenPowerSeries<f64>;
pub type EvenSeriesF32 = series::EvenPowerSeries<f32>;
pub type EvenSeriesExact = series::EvenPowerSeries<Rational>;

pub type Kernel = kernel::KernelCoefficients<f64>;
pub type KernelF32 = kernel::KernelCoefficients<f32>;
pub type KernelExact = kernel::KernelCoefficients<Rational>;

pub type Complex = num_complex::Complex64;
