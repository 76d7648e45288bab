//! Spherical-harmonic synthesis and analysis for the disk (`n = 2`) and the
//! ball (`n = 3`).
//!
//! For `n = 3`, `Y_lm(θ₁,θ₂) = (−1)^m N_lm P_lm(cos θ₁) e^{imθ₂}` with
//! `P_lm(s) = (1−s²)^{m/2} dᵐ/dsᵐ P_l(s)` (no phase inside `P_lm`), and
//! `Y_{l,−m} = (−1)^m conj(Y_lm)`. For `n = 2` the harmonics of degree `l`
//! are `e^{±ilθ}/√(2π)`, stored under `m = ±l`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::json::fmt17;
use crate::radial::ModeState;
use crate::Complex;

/// `N_lm P_lm(s)` for `0 ≤ m ≤ l`, by the standard normalized recurrences.
///
/// Stable well past `l = 64`; no factorials are formed.
pub fn normalized_legendre(l: usize, m: usize, s: f64) -> f64 {
    assert!(m <= l, "need m ≤ l");
    let sin = (1.0 - s * s).max(0.0).sqrt();
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    for k in 1..=m {
        let k = k as f64;
        pmm *= ((2.0 * k + 1.0) / (2.0 * k)).sqrt() * sin;
    }
    if l == m {
        return pmm;
    }
    let mut prev = pmm;
    let mut cur = (2.0 * m as f64 + 3.0).sqrt() * s * pmm;
    let mf = m as f64;
    for ll in m + 2..=l {
        let lf = ll as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
        let next = a * (s * cur - b * prev);
        prev = cur;
        cur = next;
    }
    cur
}

/// `√((2l+1)/(4π) · (l−m)!/(l+m)!)`, via log-factorial sums.
fn normalization(l: usize, m: usize) -> f64 {
    let log_ratio: f64 = (l - m + 1..=l + m).map(|k| -(k as f64).ln()).sum();
    ((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * (0.5 * log_ratio).exp()
}

/// `P_lm(s) = (1−s²)^{m/2} dᵐ/dsᵐ P_l(s)`, with `P_11 = √(1−s²)`.
pub fn assoc_legendre(l: usize, m: usize, s: f64) -> f64 {
    normalized_legendre(l, m, s) / normalization(l, m)
}

/// `Y_lm(θ₁, θ₂)` on the 2-sphere; negative `m` by conjugation.
pub fn sph_harm(l: usize, m: i64, theta1: f64, theta2: f64) -> Complex {
    let am = m.unsigned_abs() as usize;
    assert!(am <= l, "need |m| ≤ l");
    let sign = if am % 2 == 0 { 1.0 } else { -1.0 };
    let y = Complex::from_polar(sign * normalized_legendre(l, am, theta1.cos()), am as f64 * theta2);
    if m >= 0 {
        y
    } else {
        y.conj() * sign
    }
}

/// Harmonic of degree `l`, order `m` on `S^{n−1}`.
pub fn harmonic(n: usize, l: usize, m: i64, theta1: f64, theta2: f64) -> Complex {
    match n {
        2 => Complex::from_polar(1.0 / (2.0 * PI).sqrt(), m as f64 * theta2),
        _ => sph_harm(l, m, theta1, theta2),
    }
}

/// Admissible `(l, m)` up to degree `s` for dimension `n`.
pub fn admissible_modes(n: usize, s: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::new();
    for l in 0..=s {
        let li = l as i64;
        match n {
            2 if l == 0 => out.push((0, 0)),
            2 => out.extend([(l, -li), (l, li)]),
            _ => out.extend((-li..=li).map(|m| (l, m))),
        }
    }
    out
}

fn check_dimension(n: usize) -> Result<()> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "n",
            detail: format!("angular fields are supported for n = 2, 3; got {n}"),
        })
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`, by Newton iteration.
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; q];
    let mut w = vec![0.0; q];
    let eval = |z: f64| {
        // (P_q(z), P_q'(z))
        let (mut p0, mut p1) = (1.0, z);
        for k in 2..=q {
            let k = k as f64;
            let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        let p = if q == 0 { 1.0 } else if q == 1 { z } else { p1 };
        let pm = if q == 1 { 1.0 } else { p0 };
        (p, q as f64 * (z * p - pm) / (z * z - 1.0))
    };
    for i in 0..q {
        let mut z = (PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = eval(z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = eval(z);
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Product quadrature grid on `S^{n−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularGrid {
    pub n: usize,
    /// Polar angles (empty for `n = 2`).
    pub theta1: Vec<f64>,
    /// Gauss–Legendre weights in `cos θ₁` (empty for `n = 2`).
    pub theta1_weights: Vec<f64>,
    /// Equispaced azimuths in `[0, 2π)`.
    pub theta2: Vec<f64>,
}

impl AngularGrid {
    /// `q1` Gauss–Legendre nodes in `cos θ₁` times `q2` equispaced azimuths.
    /// `q1` is ignored for `n = 2`.
    pub fn new(n: usize, q1: usize, q2: usize) -> Result<Self> {
        check_dimension(n)?;
        if q2 == 0 || (n == 3 && q1 == 0) {
            return Err(Error::InvalidParameter {
                name: "angular grid",
                detail: "node counts must be positive".into(),
            });
        }
        let (theta1, theta1_weights) = if n == 3 {
            let (x, w) = gauss_legendre(q1);
            (x.iter().map(|s| s.acos()).collect(), w)
        } else {
            (Vec::new(), Vec::new())
        };
        let theta2 = (0..q2).map(|j| 2.0 * PI * j as f64 / q2 as f64).collect();
        Ok(Self {
            n,
            theta1,
            theta1_weights,
            theta2,
        })
    }

    /// `2S + 2` nodes along each axis.
    pub fn for_band_limit(n: usize, s: usize) -> Result<Self> {
        Self::new(n, 2 * s + 2, 2 * s + 2)
    }

    pub fn len(&self) -> usize {
        self.theta1.len().max(1) * self.theta2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(θ₁, θ₂)` in storage order; `θ₁ = π/2` for `n = 2`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        if self.n == 2 {
            return self.theta2.iter().map(|t| (0.5 * PI, *t)).collect();
        }
        self.theta1
            .iter()
            .flat_map(|a| self.theta2.iter().map(move |b| (*a, *b)))
            .collect()
    }

    /// Quadrature weights in storage order, summing to the sphere's area.
    pub fn weights(&self) -> Vec<f64> {
        let dphi = 2.0 * PI / self.theta2.len() as f64;
        if self.n == 2 {
            return vec![dphi; self.theta2.len()];
        }
        self.theta1_weights
            .iter()
            .flat_map(|w| std::iter::repeat_n(w * dphi, self.theta2.len()))
            .collect()
    }

    fn resolves(&self, s: usize) -> bool {
        let need = 2 * s + 2;
        self.theta2.len() >= need && (self.n == 2 || self.theta1.len() >= need)
    }
}

/// Harmonic coefficients of one angular field, complete up to `band_limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    pub n: usize,
    pub band_limit: usize,
    pub coefficients: BTreeMap<(usize, i64), Complex>,
}

impl ModeSet {
    pub fn new(n: usize, band_limit: usize, coefficients: BTreeMap<(usize, i64), Complex>) -> Result<Self> {
        check_dimension(n)?;
        let want = admissible_modes(n, band_limit);
        if coefficients.len() != want.len() || want.iter().any(|k| !coefficients.contains_key(k)) {
            return Err(Error::BandLimitMismatch(format!(
                "expected exactly the {} admissible modes up to degree {band_limit}, got {}",
                want.len(),
                coefficients.len()
            )));
        }
        Ok(Self {
            n,
            band_limit,
            coefficients,
        })
    }

    pub fn zeros(n: usize, band_limit: usize) -> Result<Self> {
        let c = admissible_modes(n, band_limit)
            .into_iter()
            .map(|k| (k, Complex::new(0.0, 0.0)))
            .collect();
        Self::new(n, band_limit, c)
    }

    /// Values of per-mode radial states at radius `r`. `boundary` supplies
    /// each mode's Dirichlet value for points beyond the last node.
    pub fn from_states(
        states: &BTreeMap<(usize, i64), ModeState>,
        band_limit: usize,
        r: f64,
        boundary: impl Fn(usize, i64) -> Complex,
    ) -> Result<Self> {
        let first = states
            .values()
            .next()
            .ok_or_else(|| Error::BandLimitMismatch("no modes".into()))?;
        if states.values().any(|s| s.grid != first.grid || s.n != first.n) {
            return Err(Error::BandLimitMismatch("modes do not share one radial grid".into()));
        }
        let c = states
            .iter()
            .map(|(&(l, m), s)| ((l, m), s.value_at(r, boundary(l, m))))
            .collect();
        Self::new(first.n, band_limit, c)
    }

    /// Sum of squared magnitudes; equals the field's `L²(S^{n−1})` norm squared.
    pub fn energy(&self) -> f64 {
        self.coefficients.values().map(|c| c.norm_sqr()).sum()
    }
}

/// Field values `Σ c_lm Y_lm` at the grid points.
pub fn synthesize(modes: &ModeSet, grid: &AngularGrid) -> Result<Vec<Complex>> {
    if modes.n != grid.n {
        return Err(Error::BandLimitMismatch(format!(
            "mode set is for n = {}, grid for n = {}",
            modes.n, grid.n
        )));
    }
    Ok(grid
        .points()
        .iter()
        .map(|&(a, b)| {
            modes
                .coefficients
                .iter()
                .map(|(&(l, m), c)| c * harmonic(grid.n, l, m, a, b))
                .sum()
        })
        .collect())
}

/// Synthesize per-mode radial states at radius `r`.
pub fn synthesize_states(
    states: &BTreeMap<(usize, i64), ModeState>,
    band_limit: usize,
    grid: &AngularGrid,
    r: f64,
    boundary: impl Fn(usize, i64) -> Complex,
) -> Result<Vec<Complex>> {
    synthesize(&ModeSet::from_states(states, band_limit, r, boundary)?, grid)
}

/// Coefficients `⟨f, Y_lm⟩` by product quadrature.
pub fn analyze(field: &[Complex], grid: &AngularGrid, s: usize) -> Result<ModeSet> {
    if !grid.resolves(s) {
        return Err(Error::UnderResolvedGrid(format!(
            "band limit {s} needs at least {} nodes per axis",
            2 * s + 2
        )));
    }
    if field.len() != grid.len() {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            found: field.len(),
        });
    }
    let pts = grid.points();
    let w = grid.weights();
    let coefficients = admissible_modes(grid.n, s)
        .into_iter()
        .map(|(l, m)| {
            let c = pts
                .iter()
                .zip(&w)
                .zip(field)
                .map(|((&(a, b), wi), f)| f * harmonic(grid.n, l, m, a, b).conj() * *wi)
                .sum();
            ((l, m), c)
        })
        .collect();
    ModeSet::new(grid.n, s, coefficients)
}

/// CSV `theta1,theta2,value` of the real part of a field.
pub fn field_csv(grid: &AngularGrid, values: &[Complex]) -> String {
    let mut out = String::from("theta1,theta2,value\n");
    for ((a, b), v) in grid.points().iter().zip(values) {
        out.push_str(&format!("{},{},{}\n", fmt17(*a), fmt17(*b), fmt17(v.re)));
    }
    out
}
