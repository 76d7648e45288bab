//! Power-series solution of the singular backstepping kernel equations.
//!
//! The kernel is written `K(r,ρ) = G(r,ρ) ρ (ρ/r)^{l+n-2}` where `G` solves
//!
//! ```text
//! s(ρ) G = G_rr + (3-n-2l)/r G_r - G_ρρ + (1-n-2l)/ρ G_ρ,
//! G(r,r) = -(1/(2r)) ∫₀^r s(σ) dσ,          s = (λ + c)/ε.
//! ```
//!
//! With an even reaction the solution is even in both variables,
//! `G = Σ_i Σ_{j≤i} C_ij r^{2j} ρ^{2(i-j)}`, and the coefficients of total
//! index `i` follow from those of lower index through
//!
//! ```text
//! Σ_j C_ij = -λ_i / (2(2i+1))
//! 4[(j+1)(j+1-γ') C_{i,j+1} - (i-j)(i-j+γ') C_ij] = B_{(i-1)j},  0 ≤ j < i
//! B_{(i-1)j} = Σ_{k=j}^{i-1} C_kj λ_{i-1-k}
//! ```
//!
//! where `γ' = n/2 + l - 1`. The homogeneous part of each row is a chain in
//! `j` whose sum `κ(i,γ')` is strictly positive, so every row has a unique
//! solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::scalar::{powu, Scalar};
use crate::series::{boundary_series, validate_even, EvenPowerSeries, RawSeries};

/// Default truncation order (highest total index `i`).
pub const DEFAULT_ORDER: usize = 15;

/// Largest truncation order accepted by [`solve_kernel`].
pub const DEFAULT_ORDER_CAP: usize = 400;

/// Triangular coefficient array of the even kernel series for one `(n, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCoefficients<T> {
    n: usize,
    l: usize,
    gamma_prime: T,
    order: usize,
    c: Vec<Vec<T>>,
}

/// `γ' = n/2 + l - 1`.
pub fn gamma_prime<T: Scalar>(n: usize, l: usize) -> T {
    T::ratio((n + 2 * l) as i64 - 2, 2)
}

/// `a_ij(γ') = (j+1)(j+1-γ') / ((i-j)(i-j+γ'))` for `0 ≤ j < i`.
pub fn a_coeff<T: Scalar>(i: usize, j: usize, gamma_prime: &T) -> T {
    debug_assert!(j < i);
    let jp = T::from_index(j + 1);
    let d = T::from_index(i - j);
    jp.clone() * (jp - gamma_prime.clone()) / (d.clone() * (d + gamma_prime.clone()))
}

/// `κ(i,γ') = (2i)!/i! · Γ(γ'+1)/Γ(i+γ'+1) = Π_{k=1}^{i} (i+k)/(γ'+k)`.
///
/// The ratio of Gamma functions telescopes, so the product form stays exact
/// for rational scalars and avoids factorial overflow in floating point.
pub fn kappa<T: Scalar>(i: usize, gamma_prime: &T) -> T {
    (1..=i).fold(T::one(), |acc, k| {
        acc * T::from_index(i + k) / (gamma_prime.clone() + T::from_index(k))
    })
}

/// `κ(i,γ') = 1 + Σ_{j=0}^{i-1} Π_{k=j}^{i-1} a_ik(γ')`, the definition.
pub fn kappa_sum_of_products<T: Scalar>(i: usize, gamma_prime: &T) -> T {
    let mut total = T::one();
    let mut prod = T::one();
    for j in (0..i).rev() {
        prod *= a_coeff(i, j, gamma_prime);
        total += prod.clone();
    }
    total
}

/// The inhomogeneous contribution to row `i`'s sum once `C_ii` is factored
/// out: `H_i = Σ_r (1 + Σ_{j<r} Π_{k=j}^{r-1} a_ik) B̂_r`.
pub fn h_term<T: Scalar>(i: usize, gamma_prime: &T, b_hat: &[T]) -> T {
    assert_eq!(b_hat.len(), i);
    (0..i)
        .map(|r| {
            let mut weight = T::one();
            let mut prod = T::one();
            for j in (0..r).rev() {
                prod *= a_coeff(i, j, gamma_prime);
                weight += prod.clone();
            }
            weight * b_hat[r].clone()
        })
        .fold(T::zero(), |acc, x| acc + x)
}

/// Solves the kernel series for degree `l` on the `n`-ball up to order `order`.
pub fn solve_kernel<T: Scalar>(
    reaction: &EvenPowerSeries<T>,
    n: usize,
    l: usize,
    order: usize,
) -> Result<KernelCoefficients<T>> {
    solve_kernel_capped(reaction, n, l, order, DEFAULT_ORDER_CAP)
}

/// Validates a mixed-parity reaction series and solves.
pub fn solve_kernel_raw<T: Scalar>(
    reaction: &RawSeries<T>,
    evenness_tolerance: f64,
    n: usize,
    l: usize,
    order: usize,
) -> Result<KernelCoefficients<T>> {
    let even = validate_even(reaction, evenness_tolerance)?;
    solve_kernel(&even, n, l, order)
}

pub fn solve_kernel_capped<T: Scalar>(
    reaction: &EvenPowerSeries<T>,
    n: usize,
    l: usize,
    order: usize,
    cap: usize,
) -> Result<KernelCoefficients<T>> {
    if n < 2 {
        return Err(Error::InvalidParameter {
            name: "n",
            detail: format!("ball dimension must be at least 2, got {n}"),
        });
    }
    if order > cap {
        return Err(Error::OrderOverflow { order, cap });
    }
    if !(reaction.radius_hint() > 1.0) {
        return Err(Error::InsufficientConvergenceRadius(reaction.radius_hint()));
    }

    let gp: T = gamma_prime(n, l);
    let lam = |i: usize| reaction.coeff(i);
    let mut c: Vec<Vec<T>> = Vec::with_capacity(order + 1);
    c.push(vec![-lam(0) / T::from_index(2)]);

    for i in 1..=order {
        // B̂_{(i-1)j} = -B_{(i-1)j} / (4 (i-j)(i-j+γ'))
        let b_hat: Vec<T> = (0..i)
            .map(|j| {
                let b = (j..i)
                    .map(|k| c[k][j].clone() * lam(i - 1 - k))
                    .fold(T::zero(), |acc, x| acc + x);
                let d = T::from_index(i - j);
                -b / (T::from_index(4) * d.clone() * (d + gp.clone()))
            })
            .collect();
        let a: Vec<T> = (0..i).map(|j| a_coeff(i, j, &gp)).collect();

        // Particular chain with C_ii = 0; its sum is H_i.
        let mut h = T::zero();
        let mut next = T::zero();
        for j in (0..i).rev() {
            next = a[j].clone() * next + b_hat[j].clone();
            h += next.clone();
        }
        let target = lam(i) / T::from_index(2 * (2 * i + 1));
        let diag = -(target + h) / kappa(i, &gp);

        let mut row = vec![T::zero(); i + 1];
        row[i] = diag;
        for j in (0..i).rev() {
            row[j] = a[j].clone() * row[j + 1].clone() + b_hat[j].clone();
        }
        c.push(row);
    }

    Ok(KernelCoefficients {
        n,
        l,
        gamma_prime: gp,
        order,
        c,
    })
}

/// `x^k` for `k = 0..=order`.
fn power_table<T: Scalar>(x: &T, order: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(order + 1);
    let mut acc = T::one();
    for _ in 0..=order {
        out.push(acc.clone());
        acc *= x.clone();
    }
    out
}

impl<T: Scalar> KernelCoefficients<T> {
    /// Builds from a raw triangular array, checking its shape.
    pub fn from_parts(n: usize, l: usize, order: usize, c: Vec<Vec<T>>) -> Result<Self> {
        if c.len() != order + 1 || c.iter().enumerate().any(|(i, row)| row.len() != i + 1) {
            return Err(Error::Format(format!(
                "coefficient array is not triangular of order {order}"
            )));
        }
        Ok(Self {
            n,
            l,
            gamma_prime: gamma_prime(n, l),
            order,
            c,
        })
    }

    pub fn zero(n: usize, l: usize, order: usize) -> Self {
        let c = (0..=order).map(|i| vec![T::zero(); i + 1]).collect();
        Self::from_parts(n, l, order, c).expect("triangular by construction")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn gamma_prime(&self) -> &T {
        &self.gamma_prime
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `C[i][j]`, coefficient of `r^{2j} ρ^{2(i-j)}`.
    pub fn coeff(&self, i: usize, j: usize) -> &T {
        &self.c[i][j]
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.c
    }

    pub fn max_abs(&self) -> f64 {
        self.c
            .iter()
            .flatten()
            .map(|x| x.to_f64_lossy().abs())
            .fold(0.0, f64::max)
    }

    /// `G(r,ρ)` without domain checks.
    pub fn g_unchecked(&self, r: &T, rho: &T) -> T {
        let rp = power_table(&(r.clone() * r.clone()), self.order);
        let pp = power_table(&(rho.clone() * rho.clone()), self.order);
        let mut total = T::zero();
        for (i, row) in self.c.iter().enumerate() {
            for (j, cij) in row.iter().enumerate() {
                total += cij.clone() * rp[j].clone() * pp[i - j].clone();
            }
        }
        total
    }

    /// `G(r,ρ)` on `0 ≤ ρ ≤ r ≤ 1`.
    pub fn evaluate_g(&self, r: &T, rho: &T) -> Result<T> {
        check_triangle(r, rho, false)?;
        Ok(self.g_unchecked(r, rho))
    }

    /// `K(r,ρ) = G(r,ρ) ρ (ρ/r)^{l+n-2}` on `0 ≤ ρ ≤ r ≤ 1`, `r > 0`.
    pub fn evaluate_k(&self, r: &T, rho: &T) -> Result<T> {
        check_triangle(r, rho, true)?;
        let ratio = rho.clone() / r.clone();
        Ok(self.g_unchecked(r, rho) * rho.clone() * powu(&ratio, self.l + self.n - 2))
    }

    /// Relative residuals of the row-sum and recurrence constraints.
    ///
    /// Each entry is scaled by the largest magnitude among the terms that
    /// enter the corresponding equation.
    pub fn constraint_residuals(&self, reaction: &EvenPowerSeries<T>) -> Vec<RowResidual> {
        let gp = &self.gamma_prime;
        let lam = |i: usize| reaction.coeff(i);
        let mag = |x: &T| x.to_f64_lossy().abs();
        (0..=self.order)
            .map(|i| {
                let row = &self.c[i];
                let target = -lam(i) / T::from_index(2 * (2 * i + 1));
                let sum = row.iter().cloned().fold(T::zero(), |a, x| a + x);
                let scale = row.iter().map(mag).fold(mag(&target), f64::max);
                let row_sum = rel(mag(&(sum - target)), scale);

                let mut recurrence = 0.0f64;
                for j in 0..i {
                    let b = (j..i)
                        .map(|k| self.c[k][j].clone() * lam(i - 1 - k))
                        .fold(T::zero(), |a, x| a + x);
                    let jp = T::from_index(j + 1);
                    let d = T::from_index(i - j);
                    let t1 = T::from_index(4) * jp.clone() * (jp - gp.clone()) * row[j + 1].clone();
                    let t2 = T::from_index(4) * d.clone() * (d + gp.clone()) * row[j].clone();
                    let scale = mag(&t1).max(mag(&t2)).max(mag(&b));
                    let res = mag(&(t1 - t2 - b));
                    recurrence = recurrence.max(rel(res, scale));
                }
                RowResidual {
                    row: i,
                    row_sum,
                    recurrence,
                }
            })
            .collect()
    }
}

fn rel(res: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        res / scale
    } else {
        res
    }
}

fn check_triangle<T: Scalar>(r: &T, rho: &T, strict_r: bool) -> Result<()> {
    let bad = *rho < T::zero()
        || *rho > *r
        || *r > T::one()
        || (strict_r && *r <= T::zero());
    if bad {
        return Err(Error::DomainViolation {
            what: "kernel argument",
            detail: format!(
                "(r, rho) = ({}, {}) not in 0 <= rho <= r <= 1{}",
                r.to_f64_lossy(),
                rho.to_f64_lossy(),
                if strict_r { ", r > 0" } else { "" }
            ),
        });
    }
    Ok(())
}

/// Free-function form of [`KernelCoefficients::evaluate_g`].
pub fn evaluate_g<T: Scalar>(k: &KernelCoefficients<T>, r: &T, rho: &T) -> Result<T> {
    k.evaluate_g(r, rho)
}

/// Free-function form of [`KernelCoefficients::evaluate_k`].
pub fn evaluate_k<T: Scalar>(k: &KernelCoefficients<T>, r: &T, rho: &T) -> Result<T> {
    k.evaluate_k(r, rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub row: usize,
    pub row_sum: f64,
    pub recurrence: f64,
}

/// Residual of the kernel PDE and its boundary condition for a truncated
/// series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Max of |residual polynomial| over `sample_grid`.
    pub max_pde_residual: f64,
    /// Max over sampled `r ∈ [0,1]` of `|G(r,r) - boundary value|`.
    pub max_boundary_residual: f64,
    pub sample_grid: String,
    /// `per_degree_residuals[d]` is the largest residual coefficient of total
    /// degree `2d` in `(r, ρ)`.
    pub per_degree_residuals: Vec<f64>,
}

impl ResidualReport {
    /// Largest residual coefficient among total degrees `2d` with `d ≤ max_degree`.
    pub fn max_matched(&self, max_degree: usize) -> f64 {
        self.per_degree_residuals
            .iter()
            .take(max_degree + 1)
            .cloned()
            .fold(0.0, f64::max)
    }
}

const RESIDUAL_SAMPLES: usize = 20;
const BOUNDARY_SAMPLES: usize = 200;

/// Applies the kernel PDE to the truncated series by exact polynomial
/// arithmetic and samples the boundary condition.
pub fn pde_residual<T: Scalar>(
    k: &KernelCoefficients<T>,
    reaction: &EvenPowerSeries<T>,
) -> ResidualReport {
    let res = residual_polynomial(k, reaction);

    let per_degree_residuals = res
        .iter()
        .enumerate()
        .map(|(d, _)| {
            (0..=d)
                .map(|a| res_coeff(&res, a, d - a).to_f64_lossy().abs())
                .fold(0.0, f64::max)
        })
        .collect();

    let resf: Vec<Vec<f64>> = res
        .iter()
        .map(|row| row.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    let mut max_pde_residual = 0.0f64;
    for ir in 0..=RESIDUAL_SAMPLES {
        let r = ir as f64 / RESIDUAL_SAMPLES as f64;
        for ip in 0..=ir {
            let rho = ip as f64 / RESIDUAL_SAMPLES as f64;
            max_pde_residual = max_pde_residual.max(eval_total_degree(&resf, r, rho).abs());
        }
    }

    let bseries = boundary_series(reaction);
    let kf: Vec<Vec<f64>> = k
        .rows()
        .iter()
        .map(|row| row.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    let bf: Vec<f64> = bseries.coeffs().iter().map(|x| x.to_f64_lossy()).collect();
    let max_boundary_residual = (0..=BOUNDARY_SAMPLES)
        .map(|i| {
            let r = i as f64 / BOUNDARY_SAMPLES as f64;
            let r2 = r * r;
            // On the diagonal every monomial of total index i collapses to r^{2i}.
            let g: f64 = kf
                .iter()
                .rev()
                .fold(0.0, |acc, row| acc * r2 + row.iter().sum::<f64>());
            let b: f64 = bf.iter().rev().fold(0.0, |acc, c| acc * r2 + c);
            (g - b).abs()
        })
        .fold(0.0, f64::max);

    ResidualReport {
        max_pde_residual,
        max_boundary_residual,
        sample_grid: format!(
            "pde: (r, rho) = (i/{n}, j/{n}), 0 <= j <= i <= {n}; boundary: r = i/{m}, 0 <= i <= {m}",
            n = RESIDUAL_SAMPLES,
            m = BOUNDARY_SAMPLES
        ),
        per_degree_residuals,
    }
}

/// Residual `s(ρ) G - [G_rr + (3-n-2l)/r G_r - G_ρρ + (1-n-2l)/ρ G_ρ]`,
/// indexed by total index `d` then `a`: coefficient of `r^{2a} ρ^{2(d-a)}`.
fn residual_polynomial<T: Scalar>(
    k: &KernelCoefficients<T>,
    reaction: &EvenPowerSeries<T>,
) -> Vec<Vec<T>> {
    let order = k.order();
    let deg = order + reaction.order();
    let mut res: Vec<Vec<T>> = (0..=deg).map(|d| vec![T::zero(); d + 1]).collect();
    let n = k.n() as i64;
    let l = k.l() as i64;
    let r_first = T::from_int(3 - n - 2 * l);
    let rho_first = T::from_int(1 - n - 2 * l);

    for (i, row) in k.rows().iter().enumerate() {
        for (j, cij) in row.iter().enumerate() {
            // s(ρ) · C r^{2j} ρ^{2(i-j)}
            for (t, lam) in reaction.coeffs().iter().enumerate() {
                res[i + t][j] += lam.clone() * cij.clone();
            }
            let p = T::from_index(2 * j);
            let q = T::from_index(2 * (i - j));
            if j > 0 {
                let f = p.clone() * (p.clone() - T::one()) + r_first.clone() * p;
                res[i - 1][j - 1] -= f * cij.clone();
            }
            if i > j {
                let f = -(q.clone() * (q.clone() - T::one())) + rho_first.clone() * q;
                res[i - 1][j] -= f * cij.clone();
            }
        }
    }
    res
}

fn res_coeff<T: Scalar>(res: &[Vec<T>], a: usize, b: usize) -> T {
    res[a + b][a].clone()
}

fn eval_total_degree(poly: &[Vec<f64>], r: f64, rho: f64) -> f64 {
    let order = poly.len().saturating_sub(1);
    let rp: Vec<f64> = power_table(&(r * r), order);
    let pp: Vec<f64> = power_table(&(rho * rho), order);
    poly.iter()
        .enumerate()
        .map(|(d, row)| {
            row.iter()
                .enumerate()
                .map(|(a, c)| c * rp[a] * pp[d - a])
                .sum::<f64>()
        })
        .sum()
}

#[derive(Serialize, Deserialize)]
struct KernelDocument {
    n: usize,
    l: usize,
    gamma_prime: f64,
    order: usize,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
}

impl KernelCoefficients<f64> {
    /// JSON document `{n, l, gamma_prime, order, C}` with `C` row-major.
    pub fn to_json(&self) -> String {
        let doc = KernelDocument {
            n: self.n,
            l: self.l,
            gamma_prime: self.gamma_prime,
            order: self.order,
            c: self.c.clone(),
        };
        json::to_string_pretty(&doc)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KernelDocument =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let k = Self::from_parts(doc.n, doc.l, doc.order, doc.c)?;
        if k.gamma_prime != doc.gamma_prime {
            return Err(Error::Format(format!(
                "gamma_prime {} inconsistent with n = {}, l = {}",
                doc.gamma_prime, doc.n, doc.l
            )));
        }
        Ok(k)
    }

    /// Lossy conversion from another scalar type, e.g. an exact solve.
    pub fn from_scalar<T: Scalar>(k: &KernelCoefficients<T>) -> Self {
        let c = k
            .rows()
            .iter()
            .map(|row| row.iter().map(|x| x.to_f64_lossy()).collect())
            .collect();
        Self::from_parts(k.n(), k.l(), k.order(), c).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn example_reaction() -> EvenPowerSeries<f64> {
        EvenPowerSeries::new(vec![53.0, 50.0, 10.0])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn kappa_examples() {
        for gp in [0.0, 0.5, 1.5, 7.0] {
            assert_eq!(kappa(0, &gp), 1.0);
            assert!(close(kappa(1, &gp), 2.0 / (1.0 + gp), 1e-15));
        }
        assert_eq!(kappa(1, &1.5), 0.8);
        assert_eq!(kappa(2, &0.0), 6.0);
        assert_eq!(kappa(10, &0.0), 184_756.0);
    }

    #[test]
    fn kappa_forms_agree_exactly_over_rationals() {
        for i in 0..25 {
            for twice_gp in 0..30 {
                let gp = BigRational::ratio(twice_gp, 2);
                assert_eq!(kappa(i, &gp), kappa_sum_of_products(i, &gp), "i={i} 2γ'={twice_gp}");
            }
        }
    }

    #[test]
    fn a_coeff_examples() {
        for gp in [0.0, 0.5, 2.5] {
            assert!(close(a_coeff(1, 0, &gp), (1.0 - gp) / (1.0 + gp), 1e-15));
        }
        assert_eq!(a_coeff(5, 2, &0.0), 9.0 / 9.0);
        assert_eq!(a_coeff(7, 1, &0.0), 4.0 / 36.0);
        // integer γ' = j + 1 kills the chain link
        assert_eq!(a_coeff(6, 2, &3.0), 0.0);
    }

    #[test]
    fn zero_reaction_gives_zero_kernel() {
        let k = solve_kernel(&EvenPowerSeries::<f64>::zero(), 3, 2, 12).unwrap();
        assert_eq!(k.max_abs(), 0.0);
        let report = pde_residual(&k, &EvenPowerSeries::zero());
        assert_eq!(report.max_pde_residual, 0.0);
        assert_eq!(report.max_boundary_residual, 0.0);
    }

    #[test]
    fn constant_reaction_first_rows() {
        let lam = 7.0;
        for (n, l) in [(2, 0), (3, 0), (3, 4), (5, 1)] {
            let k = solve_kernel(&EvenPowerSeries::new(vec![lam]), n, l, 3).unwrap();
            assert_eq!(*k.coeff(0, 0), -lam / 2.0);
            assert!(close(*k.coeff(1, 1), -lam * lam / 16.0, 1e-14), "n={n} l={l}");
            assert!(close(*k.coeff(1, 0), lam * lam / 16.0, 1e-14));
        }
    }

    /// For n = 3, l = 0 and constant s = λ the kernel is the classical
    /// −(λ/2) Σ_q (λ(r²−ρ²)/4)^q / (q!(q+1)!).
    #[test]
    fn matches_bessel_kernel_three_ball_radial_mode() {
        let q = |a: i64, b: i64| BigRational::ratio(a, b);
        let lam = q(53, 1);
        let order = 12;
        let k = solve_kernel(&EvenPowerSeries::new(vec![lam.clone()]), 3, 0, order).unwrap();
        let mut fact = vec![BigRational::one()];
        for i in 1..=order + 2 {
            let prev = fact[i - 1].clone();
            fact.push(prev * BigRational::from_index(i));
        }
        for i in 0..=order {
            // (r² − ρ²)^i = Σ_j binom(i,j) r^{2j} (−ρ²)^{i−j}
            let lead = -lam.clone() / q(2, 1) * powu(&(lam.clone() / q(4, 1)), i)
                / (fact[i].clone() * fact[i + 1].clone());
            for j in 0..=i {
                let binom = fact[i].clone() / (fact[j].clone() * fact[i - j].clone());
                let sign = if (i - j) % 2 == 0 { q(1, 1) } else { q(-1, 1) };
                assert_eq!(*k.coeff(i, j), lead.clone() * binom * sign, "C[{i}][{j}]");
            }
        }
    }

    #[test]
    fn exact_solve_satisfies_constraints_exactly() {
        let q = |a: i64, b: i64| BigRational::ratio(a, b);
        let s = EvenPowerSeries::new(vec![q(53, 1), q(50, 1), q(10, 1)]);
        for (n, l) in [(3, 0), (3, 1), (2, 0), (2, 3), (4, 2)] {
            let k = solve_kernel(&s, n, l, 10).unwrap();
            for rr in k.constraint_residuals(&s) {
                assert_eq!(rr.row_sum, 0.0);
                assert_eq!(rr.recurrence, 0.0);
            }
            let report = pde_residual(&k, &s);
            assert_eq!(report.max_matched(9), 0.0);
            assert!(report.per_degree_residuals[10] > 0.0);
        }
    }

    #[test]
    fn float_solve_tracks_exact_solve() {
        let q = |a: i64| BigRational::from_int(a);
        let exact = solve_kernel(&EvenPowerSeries::new(vec![q(53), q(50), q(10)]), 3, 2, 15).unwrap();
        let float = solve_kernel(&example_reaction(), 3, 2, 15).unwrap();
        let exact = KernelCoefficients::from_scalar(&exact);
        let scale = exact.max_abs();
        for (re, rf) in exact.rows().iter().zip(float.rows()) {
            for (a, b) in re.iter().zip(rf) {
                assert!((a - b).abs() <= 1e-13 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn h_term_matches_particular_chain() {
        let gp = BigRational::ratio(5, 2);
        let i = 6;
        let b_hat: Vec<BigRational> = (0..i).map(|j| BigRational::ratio(j as i64 * 3 - 4, 7)).collect();
        let mut next = BigRational::zero();
        let mut sum = BigRational::zero();
        for j in (0..i).rev() {
            next = a_coeff(i, j, &gp) * next + b_hat[j].clone();
            sum += next.clone();
        }
        assert_eq!(h_term(i, &gp, &b_hat), sum);
    }

    #[test]
    fn f32_solve_runs() {
        let k = solve_kernel(&EvenPowerSeries::new(vec![53.0f32, 50.0, 10.0]), 3, 0, 8).unwrap();
        let k64 = solve_kernel(&example_reaction(), 3, 0, 8).unwrap();
        let g32 = k.evaluate_g(&1.0, &0.5).unwrap() as f64;
        let g64 = k64.evaluate_g(&1.0, &0.5).unwrap();
        assert!((g32 - g64).abs() < 1e-4 * g64.abs());
    }

    #[test]
    fn evaluation_identities() {
        let s = example_reaction();
        let k = solve_kernel(&s, 3, 1, 15).unwrap();
        let b = boundary_series(&s);
        for r in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let g = k.evaluate_g(&r, &r).unwrap();
            assert!((g - b.evaluate(&r)).abs() < 1e-10, "r = {r}");
        }
        let r = 0.6f64;
        let diag: f64 = (0..=15).map(|i| k.coeff(i, i) * r.powi(2 * i as i32)).sum();
        assert!(close(k.evaluate_g(&r, &0.0).unwrap(), diag, 1e-14));
        let kr = k.evaluate_k(&r, &r).unwrap();
        assert!(close(kr, k.evaluate_g(&r, &r).unwrap() * r, 1e-14));
        assert_eq!(k.evaluate_k(&r, &0.0).unwrap(), 0.0);
    }

    #[test]
    fn k_for_constant_reaction_three_ball() {
        let lam = 0.01;
        let k = solve_kernel(&EvenPowerSeries::new(vec![lam]), 3, 0, 4).unwrap();
        let (r, rho) = (0.8f64, 0.3f64);
        let expected = rho * rho / r * (-lam / 2.0);
        let got = k.evaluate_k(&r, &rho).unwrap();
        assert!((got - expected).abs() < lam * lam);
    }

    #[test]
    fn domain_violations() {
        let k = solve_kernel(&example_reaction(), 3, 0, 5).unwrap();
        assert!(matches!(k.evaluate_g(&0.5, &0.6), Err(Error::DomainViolation { .. })));
        assert!(matches!(k.evaluate_g(&1.1, &0.5), Err(Error::DomainViolation { .. })));
        assert!(matches!(k.evaluate_k(&0.0, &0.0), Err(Error::DomainViolation { .. })));
        assert!(k.evaluate_g(&0.0, &0.0).is_ok());
    }

    #[test]
    fn solver_preconditions() {
        let s = example_reaction();
        assert_eq!(
            solve_kernel_capped(&s, 3, 0, 50, 40).unwrap_err(),
            Error::OrderOverflow { order: 50, cap: 40 }
        );
        assert!(matches!(solve_kernel(&s, 1, 0, 5), Err(Error::InvalidParameter { .. })));
        let short = EvenPowerSeries::with_radius_hint(vec![1.0, 1.0], 0.9);
        assert!(matches!(
            solve_kernel(&short, 3, 0, 5),
            Err(Error::InsufficientConvergenceRadius(_))
        ));
        let raw = RawSeries::new(vec![1.0, 0.1]);
        assert!(matches!(
            solve_kernel_raw(&raw, 1e-12, 3, 0, 5),
            Err(Error::EvennessViolation { index: 1, .. })
        ));
    }

    #[test]
    fn m_independence_is_structural() {
        let s = example_reaction();
        let a = solve_kernel(&s, 3, 4, 15).unwrap();
        let b = solve_kernel(&s, 3, 4, 15).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let k = solve_kernel(&example_reaction(), 3, 5, 15).unwrap();
        let text = k.to_json();
        let back = KernelCoefficients::from_json(&text).unwrap();
        for (ra, rb) in k.rows().iter().zip(back.rows()) {
            for (a, b) in ra.iter().zip(rb) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(back, k);
        assert!(text.contains("\"C\""));
    }

    #[test]
    fn json_rejects_malformed() {
        let bad = r#"{"n":3,"l":0,"gamma_prime":0.5,"order":1,"C":[[1.0]]}"#;
        assert!(matches!(KernelCoefficients::from_json(bad), Err(Error::Format(_))));
        let bad = r#"{"n":3,"l":0,"gamma_prime":0.7,"order":0,"C":[[1.0]]}"#;
        assert!(matches!(KernelCoefficients::from_json(bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn kappa_positive_and_forms_agree(i in 0usize..60, gp in 0.0f64..20.0) {
            let closed = kappa(i, &gp);
            let direct = kappa_sum_of_products(i, &gp);
            prop_assert!(closed > 0.0);
            prop_assert!((closed - direct).abs() <= 1e-9 * closed, "{closed} vs {direct}");
        }

        #[test]
        fn solved_rows_satisfy_constraints(
            coeffs in prop::collection::vec(-5.0f64..5.0, 1..4),
            n in 2usize..6,
            l in 0usize..8,
        ) {
            let s = EvenPowerSeries::new(coeffs);
            let k = solve_kernel(&s, n, l, 12).unwrap();
            for rr in k.constraint_residuals(&s) {
                // Row sums cancel across up to 13 entries built by the recurrence.
                prop_assert!(rr.row_sum < 1e-10 && rr.recurrence < 1e-12, "{rr:?}");
            }
        }
    }
}
