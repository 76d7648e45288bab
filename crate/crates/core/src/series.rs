//! Even power series in the radius.
//!
//! A reaction profile λ(r) is stored through the coefficients of
//! `(λ(r) + c) / ε = Σ λ_i r^{2i}`, the form consumed by the kernel solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default absolute tolerance for accepting an odd coefficient as zero.
pub const DEFAULT_EVENNESS_TOLERANCE: f64 = 1e-12;

/// Coefficients of `Σ coeffs[i] r^{2i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvenPowerSeries<T> {
    coeffs: Vec<T>,
    /// Estimated radius of convergence on the unit-ball-normalized axis.
    /// Finite coefficient lists are polynomials, hence `f64::INFINITY`.
    radius_hint: f64,
}

impl<T: Scalar> EvenPowerSeries<T> {
    /// A polynomial in r². An empty list is the zero series.
    pub fn new(coeffs: Vec<T>) -> Self {
        Self::with_radius_hint(coeffs, f64::INFINITY)
    }

    /// A truncated series of a transcendental profile whose radius of
    /// convergence is known to the caller.
    pub fn with_radius_hint(mut coeffs: Vec<T>, radius_hint: f64) -> Self {
        if coeffs.is_empty() {
            coeffs.push(T::zero());
        }
        Self {
            coeffs,
            radius_hint,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vec::new())
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Highest stored index `i` (coefficient of r^{2i}).
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn radius_hint(&self) -> f64 {
        self.radius_hint
    }

    /// Coefficient of r^{2i}; zero beyond the stored order.
    pub fn coeff(&self, i: usize) -> T {
        self.coeffs.get(i).cloned().unwrap_or_else(T::zero)
    }

    pub fn scale(&self, factor: &T) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c.clone() * factor.clone()).collect(),
            radius_hint: self.radius_hint,
        }
    }

    /// Horner evaluation in r².
    pub fn evaluate(&self, r: &T) -> T {
        let r2 = r.clone() * r.clone();
        self.coeffs
            .iter()
            .rev()
            .fold(T::zero(), |acc, c| acc * r2.clone() + c.clone())
    }

    /// Mixed-parity embedding: coefficient of r^i.
    pub fn to_raw(&self) -> RawSeries<T> {
        let mut coeffs = Vec::with_capacity(2 * self.coeffs.len() - 1);
        for (i, c) in self.coeffs.iter().enumerate() {
            if i > 0 {
                coeffs.push(T::zero());
            }
            coeffs.push(c.clone());
        }
        RawSeries { coeffs }
    }
}

/// Coefficients of `Σ coeffs[i] r^i` before evenness has been checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries<T> {
    pub coeffs: Vec<T>,
}

impl<T: Scalar> RawSeries<T> {
    pub fn new(coeffs: Vec<T>) -> Self {
        Self { coeffs }
    }
}

/// Coefficients of `(λ(r) + c) / ε` from the even coefficients of λ.
pub fn reaction_series<T: Scalar>(
    lambda_even_coeffs: &[T],
    c: T,
    epsilon: T,
) -> Result<EvenPowerSeries<T>> {
    if epsilon <= T::zero() {
        return Err(Error::NonPositiveDiffusion(epsilon.to_f64_lossy()));
    }
    if c < T::zero() {
        return Err(Error::InvalidParameter {
            name: "c",
            detail: format!("target damping must be nonnegative, got {}", c.to_f64_lossy()),
        });
    }
    let mut coeffs: Vec<T> = lambda_even_coeffs
        .iter()
        .map(|l| l.clone() / epsilon.clone())
        .collect();
    if coeffs.is_empty() {
        coeffs.push(T::zero());
    }
    coeffs[0] += c / epsilon;
    Ok(EvenPowerSeries::new(coeffs))
}

/// Keeps the even-indexed coefficients, rejecting any odd one above `tol`.
pub fn validate_even<T: Scalar>(raw: &RawSeries<T>, tol: f64) -> Result<EvenPowerSeries<T>> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "tol",
            detail: format!("evenness tolerance must be nonnegative, got {tol}"),
        });
    }
    let tol = T::from_f64(tol).ok_or_else(|| Error::InvalidParameter {
        name: "tol",
        detail: "not representable".into(),
    })?;
    if let Some((index, value)) = raw
        .coeffs
        .iter()
        .enumerate()
        .skip(1)
        .step_by(2)
        .find(|(_, c)| c.abs() > tol)
    {
        return Err(Error::EvennessViolation {
            index,
            value: value.to_f64_lossy(),
        });
    }
    Ok(EvenPowerSeries::new(
        raw.coeffs.iter().step_by(2).cloned().collect(),
    ))
}

/// Horner evaluation of `s` at `r`.
pub fn evaluate<T: Scalar>(s: &EvenPowerSeries<T>, r: &T) -> T {
    s.evaluate(r)
}

/// Series of the kernel diagonal `G(r,r) = −(1/(2r)) ∫₀^r s(σ) dσ`.
pub fn boundary_series<T: Scalar>(s: &EvenPowerSeries<T>) -> EvenPowerSeries<T> {
    let coeffs = s
        .coeffs()
        .iter()
        .enumerate()
        .map(|(i, c)| -c.clone() / T::from_index(2 * (2 * i + 1)))
        .collect();
    EvenPowerSeries::with_radius_hint(coeffs, s.radius_hint())
}
