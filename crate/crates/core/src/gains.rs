//! Boundary-feedback gains, output-injection gains and the discrete inverse
//! transformation, all sampled on radial grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{self, fmt17};
use crate::kernel::KernelCoefficients;
use crate::radial::ModeState;
use crate::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainKind {
    Control,
    Observer,
}

/// A gain sampled at radial quadrature nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTable {
    pub kind: GainKind,
    pub n: usize,
    pub l: usize,
    /// Truncation order of the kernel the gain came from.
    pub order: usize,
    /// Diffusivity folded into an observer gain.
    pub epsilon: Option<f64>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub values: Vec<f64>,
}

/// Composite trapezoid weights for `∫₀¹ f` from samples at `nodes`.
///
/// The gaps `[0, x₀]` and `[x_last, 1]` are closed with the adjacent sample
/// value, so on a cell-centred grid this reduces to the midpoint rule.
pub fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let m = nodes.len();
    let mut w = vec![0.0; m];
    if m == 0 {
        return w;
    }
    w[0] += nodes[0];
    w[m - 1] += 1.0 - nodes[m - 1];
    for k in 0..m - 1 {
        let half = 0.5 * (nodes[k + 1] - nodes[k]);
        w[k] += half;
        w[k + 1] += half;
    }
    w
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let ok = !grid.is_empty()
        && grid[0] > 0.0
        && grid[grid.len() - 1] <= 1.0
        && grid.windows(2).all(|p| p[1] > p[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::DomainViolation {
            what: "gain grid",
            detail: "nodes must be strictly increasing within (0, 1]".into(),
        })
    }
}

/// `K(1, ρ)` at each node, for the feedback `U = ∫₀¹ K(1,ρ) u(ρ) dρ`.
pub fn control_gain(k: &KernelCoefficients<f64>, grid: &[f64]) -> Result<GainTable> {
    check_grid(grid)?;
    let values = grid
        .iter()
        .map(|rho| k.evaluate_k(&1.0, rho))
        .collect::<Result<Vec<_>>>()?;
    Ok(GainTable {
        kind: GainKind::Control,
        n: k.n(),
        l: k.l(),
        order: k.order(),
        epsilon: None,
        nodes: grid.to_vec(),
        weights: trapezoid_weights(grid),
        values,
    })
}

/// Output-injection gain `p(r) = ε G(1, r) r^l`.
///
/// The observer kernel is the control kernel transposed and reweighted by
/// `(ρ/r)^{n-1}`; the `r^{1-n}` factor cancels against `K`'s `ρ^{l+n-1}`
/// analytically, leaving a form that is regular at `r = 0`.
pub fn observer_gain(k: &KernelCoefficients<f64>, epsilon: f64, grid: &[f64]) -> Result<GainTable> {
    check_grid(grid)?;
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveDiffusion(epsilon));
    }
    let values = grid
        .iter()
        .map(|r| Ok(epsilon * k.evaluate_g(&1.0, r)? * r.powi(k.l() as i32)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GainTable {
        kind: GainKind::Observer,
        n: k.n(),
        l: k.l(),
        order: k.order(),
        epsilon: Some(epsilon),
        nodes: grid.to_vec(),
        weights: trapezoid_weights(grid),
        values,
    })
}

impl GainTable {
    pub fn zero(kind: GainKind, n: usize, l: usize, grid: &[f64]) -> Self {
        Self {
            kind,
            n,
            l,
            order: 0,
            epsilon: None,
            nodes: grid.to_vec(),
            weights: trapezoid_weights(grid),
            values: vec![0.0; grid.len()],
        }
    }

    /// `Σ_j w_j g_j u_j`.
    pub fn apply(&self, u: &[Complex]) -> Result<Complex> {
        if u.len() != self.nodes.len() {
            return Err(Error::GridMismatch {
                expected: self.nodes.len(),
                found: u.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.values)
            .zip(u)
            .map(|((w, g), x)| x * (w * g))
            .sum())
    }

    /// CSV with header `node,weight,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,weight,value\n");
        for ((x, w), v) in self.nodes.iter().zip(&self.weights).zip(&self.values) {
            out.push_str(&format!("{},{},{}\n", fmt17(*x), fmt17(*w), fmt17(*v)));
        }
        out
    }

    /// JSON sidecar `{kind, n, l, epsilon, order}`.
    pub fn sidecar_json(&self) -> String {
        json::to_string_pretty(&serde_json::json!({
            "kind": self.kind,
            "n": self.n,
            "l": self.l,
            "epsilon": self.epsilon,
            "order": self.order,
        }))
    }
}

/// Quadrature of `∫₀¹ K(1,ρ) u(ρ) dρ` on the state's grid.
pub fn control_value(g: &GainTable, u: &ModeState) -> Result<Complex> {
    let nodes = u.grid.nodes();
    if nodes.len() != g.nodes.len() || nodes.iter().zip(&g.nodes).any(|(a, b)| a != b) {
        return Err(Error::GridMismatch {
            expected: g.nodes.len(),
            found: nodes.len(),
        });
    }
    g.apply(&u.values)
}

/// Discrete Volterra operator `(T u)_k = ∫₀^{r_k} K(r_k,ρ) u(ρ) dρ` and its
/// resolvent on the uniform grid `r_k = k h`, `k = 0..=m`.
///
/// Row integrals use the trapezoid rule. The resolvent `Λ` solves
/// `(I − T) Λ = T`, so `u = w + Λ w` inverts `w = u − T u` exactly on the
/// grid; `Λ_kj / ω_kj` samples the continuous inverse kernel `L(r_k, r_j)`.
#[derive(Debug, Clone)]
pub struct VolterraResolvent {
    h: f64,
    /// Row-major lower triangle of `T`, including quadrature weights.
    forward: Vec<Vec<f64>>,
    /// Row-major lower triangle of `Λ`.
    resolvent: Vec<Vec<f64>>,
}

fn row_weight(h: f64, k: usize, j: usize) -> f64 {
    if j == 0 || j == k {
        0.5 * h
    } else {
        h
    }
}

impl VolterraResolvent {
    pub fn from_fn(kernel: impl Fn(f64, f64) -> f64, m: usize) -> Self {
        let h = 1.0 / m as f64;
        let forward: Vec<Vec<f64>> = (0..=m)
            .map(|k| {
                if k == 0 {
                    return vec![0.0];
                }
                let r = k as f64 * h;
                (0..=k)
                    .map(|j| kernel(r, j as f64 * h) * row_weight(h, k, j))
                    .collect()
            })
            .collect();
        // Column j of Λ by forward substitution on (I − T) x = T e_j-column.
        let mut resolvent: Vec<Vec<f64>> = (0..=m).map(|k| vec![0.0; k + 1]).collect();
        for j in 0..=m {
            for k in j..=m {
                let mut acc = forward[k][j];
                for i in j..k {
                    acc += forward[k][i] * resolvent[i][j];
                }
                resolvent[k][j] = acc / (1.0 - forward[k][k]);
            }
        }
        Self {
            h,
            forward,
            resolvent,
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.forward.len()).map(|k| k as f64 * self.h).collect()
    }

    /// `L(r_k, r_j)` for `1 ≤ k`, `j ≤ k`.
    pub fn inverse_kernel_value(&self, k: usize, j: usize) -> f64 {
        self.resolvent[k][j] / row_weight(self.h, k, j)
    }

    /// `w = u − T u`.
    pub fn forward(&self, u: &[Complex]) -> Vec<Complex> {
        apply_lower(&self.forward, u, -1.0)
    }

    /// `u = w + Λ w`.
    pub fn inverse(&self, w: &[Complex]) -> Vec<Complex> {
        apply_lower(&self.resolvent, w, 1.0)
    }
}

fn apply_lower(rows: &[Vec<f64>], x: &[Complex], sign: f64) -> Vec<Complex> {
    rows.iter()
        .zip(x)
        .map(|(row, xk)| {
            let s: Complex = row.iter().zip(x).map(|(a, xi)| xi * *a).sum();
            xk + s * sign
        })
        .collect()
}

/// Resolvent of the kernel transformation on `m` uniform intervals.
pub fn inverse_kernel(k: &KernelCoefficients<f64>, m: usize) -> Result<VolterraResolvent> {
    if m == 0 {
        return Err(Error::InvalidParameter {
            name: "m",
            detail: "need at least one interval".into(),
        });
    }
    Ok(VolterraResolvent::from_fn(
        |r, rho| {
            if r == 0.0 {
                0.0
            } else {
                k.evaluate_k(&r, &rho.min(r)).expect("on the triangle")
            }
        },
        m,
    ))
}
