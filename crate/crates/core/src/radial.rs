//! Method-of-lines simulation of single harmonics on the unit ball.
//!
//! Every `(l, m)` coefficient evolves on a staggered radial grid under
//! `ε r^{1−n}(r^{n−1}u_r)_r − ε l(l+n−2)u/r² + q(r)u` with a Dirichlet value at
//! `r = 1`. Time stepping is the implicit trapezoid rule (Crank–Nicolson).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gains::{control_gain, observer_gain, GainKind, GainTable};
use crate::json::fmt17;
use crate::kernel::KernelCoefficients;
use crate::modes::ModePlan;
use crate::series::EvenPowerSeries;
use crate::Complex;

/// Fit samples whose squared norm falls below this fraction of the initial
/// squared norm are treated as round-off and excluded.
pub const DECAY_FIT_FLOOR: f64 = 1e-14;

/// Cell-centred nodes `r_k = (k + ½)h`, `h = 1/m_points`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadialGrid {
    m_points: usize,
}

impl RadialGrid {
    /// At least three nodes are needed by the boundary-flux stencil.
    pub fn new(m_points: usize) -> Result<Self> {
        if m_points < 3 {
            return Err(Error::InvalidParameter {
                name: "m_points",
                detail: format!("need at least 3 radial nodes, got {m_points}"),
            });
        }
        Ok(Self { m_points })
    }

    pub fn m_points(&self) -> usize {
        self.m_points
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m_points as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m_points).map(|k| self.node(k)).collect()
    }

    /// Midpoint weights `r_k^{n−1} h` for `∫₀¹ f r^{n−1} dr`.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        let h = self.h();
        (0..self.m_points)
            .map(|k| self.node(k).powi(n as i32 - 1) * h)
            .collect()
    }
}

/// Radial profile of one harmonic coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub n: usize,
    pub l: usize,
    pub m: i64,
    pub grid: RadialGrid,
    pub values: Vec<Complex>,
    pub time: f64,
}

impl ModeState {
    pub fn zeros(n: usize, l: usize, m: i64, grid: RadialGrid) -> Self {
        Self::from_fn(n, l, m, grid, |_| Complex::new(0.0, 0.0))
    }

    pub fn from_fn(n: usize, l: usize, m: i64, grid: RadialGrid, f: impl Fn(f64) -> Complex) -> Self {
        Self {
            n,
            l,
            m,
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
            time: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self, &self.grid)
    }

    /// Value at radius `r`, given the Dirichlet value at `r = 1`.
    ///
    /// Linear between nodes and towards the boundary; below the first node
    /// the regular behaviour `u ∝ r^l` is used.
    pub fn value_at(&self, r: f64, boundary: Complex) -> Complex {
        let g = self.grid;
        let h = g.h();
        let last = g.m_points() - 1;
        let r0 = g.node(0);
        if r <= r0 {
            return self.values[0] * (r / r0).powi(self.l as i32);
        }
        if r >= g.node(last) {
            let t = (r - g.node(last)) / (0.5 * h);
            return self.values[last] * (1.0 - t) + boundary * t;
        }
        let k = (((r - r0) / h).floor() as usize).min(last - 1);
        let t = (r - g.node(k)) / h;
        self.values[k] * (1.0 - t) + self.values[k + 1] * t
    }

    fn difference(&self, other: &ModeState) -> ModeState {
        ModeState {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }
}

/// `√(Σ_k |u_k|² r_k^{n−1} h)`.
pub fn l2_norm(u: &ModeState, grid: &RadialGrid) -> f64 {
    assert_eq!(u.values.len(), grid.m_points(), "state does not match grid");
    grid.weights(u.n)
        .iter()
        .zip(&u.values)
        .map(|(w, x)| w * x.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ImplicitTrapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopMode {
    /// `U = 0` on the plant.
    Open,
    /// `U` from the kernel feedback on the plant state.
    FullState,
    /// `U` from the kernel feedback on an observer driven by the boundary flux.
    OutputFeedback,
    /// The target system `w_t = … − c w`, `w(1) = 0`.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub epsilon: f64,
    pub c: f64,
    /// Physical reaction λ(r), without `c` and not divided by ε.
    pub reaction: EvenPowerSeries<f64>,
    pub grid: RadialGrid,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub loop_mode: LoopMode,
    /// Record every `sample_every`-th step (the final step is always kept).
    pub sample_every: usize,
    /// Radii at which each recorded sample is interpolated.
    pub probe_radii: Vec<f64>,
    /// Times at which full states are kept; each snaps to the nearest step.
    pub snapshot_times: Vec<f64>,
    /// Keep the plant state at every recorded sample.
    pub record_states: bool,
}

impl SimConfig {
    pub fn new(epsilon: f64, c: f64, reaction: EvenPowerSeries<f64>, grid: RadialGrid, dt: f64, t_end: f64, loop_mode: LoopMode) -> Self {
        Self {
            epsilon,
            c,
            reaction,
            grid,
            dt,
            t_end,
            scheme: Scheme::ImplicitTrapezoidal,
            loop_mode,
            sample_every: 1,
            probe_radii: Vec::new(),
            snapshot_times: Vec::new(),
            record_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::NonPositiveDiffusion(self.epsilon));
        }
        let bad = |name, detail: String| Err(Error::InvalidParameter { name, detail });
        if !(self.c >= 0.0) {
            return bad("c", format!("target damping must be nonnegative, got {}", self.c));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt", format!("time step must be positive, got {}", self.dt));
        }
        // t_end = 0 is allowed and yields the initial sample only.
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() || (self.t_end > 0.0 && self.t_end < self.dt) {
            return bad("t_end", format!("need t_end = 0 or t_end ≥ dt, got {}", self.t_end));
        }
        if self.sample_every == 0 {
            return bad("sample_every", "must be at least 1".into());
        }
        if self.probe_radii.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("probe_radii", "radii must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Per-mode time series. `times`, `l2_norms`, `control_signal` and `probes`
/// share one index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n: usize,
    pub l: usize,
    pub m: i64,
    pub loop_mode: LoopMode,
    pub controlled: bool,
    pub times: Vec<f64>,
    pub l2_norms: Vec<f64>,
    pub observer_error_norms: Option<Vec<f64>>,
    pub control_signal: Vec<Complex>,
    /// Slope of `ln ‖u‖²` over the final half of the run.
    pub fitted_decay_rate: Option<f64>,
    pub observer_fitted_decay_rate: Option<f64>,
    /// Plant values at the probe radii, per sample.
    pub probes: Vec<Vec<Complex>>,
    /// Observer values at the probe radii, per sample.
    pub observer_probes: Vec<Vec<Complex>>,
    pub snapshots: Vec<ModeState>,
    pub observer_snapshots: Vec<ModeState>,
    pub states: Vec<ModeState>,
}

impl SimReport {
    /// CSV with header `time,l2_norm,control_re,control_im` plus
    /// `observer_error_norm` when an observer ran.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("time,l2_norm,control_re,control_im");
        if self.observer_error_norms.is_some() {
            out.push_str(",observer_error_norm");
        }
        out.push('\n');
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}",
                fmt17(self.times[i]),
                fmt17(self.l2_norms[i]),
                fmt17(self.control_signal[i].re),
                fmt17(self.control_signal[i].im)
            ));
            if let Some(e) = &self.observer_error_norms {
                out.push_str(&format!(",{}", fmt17(e[i])));
            }
            out.push('\n');
        }
        out
    }
}

/// Least-squares slope of `ln ‖u‖²` against time over the final half of
/// the samples that lie above the relative round-off floor.
pub fn fit_decay_rate(times: &[f64], norms: &[f64]) -> Option<f64> {
    let first = norms.first()?.powi(2);
    let floor = DECAY_FIT_FLOOR * first;
    let above: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(_, v)| v.powi(2) > floor && **v > 0.0)
        .map(|(t, v)| (*t, (v * v).ln()))
        .collect();
    let pts = &above[above.len() / 2..];
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone)]
struct Tridiag {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiag {
    fn matvec(&self, x: &[Complex]) -> Vec<Complex> {
        let m = x.len();
        (0..m)
            .map(|k| {
                let mut acc = x[k] * self.diag[k];
                if k > 0 {
                    acc += x[k - 1] * self.lower[k];
                }
                if k + 1 < m {
                    acc += x[k + 1] * self.upper[k];
                }
                acc
            })
            .collect()
    }
}

/// LU factors of a real tridiagonal matrix (Thomas algorithm).
#[derive(Debug, Clone)]
struct Thomas {
    lower: Vec<f64>,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl Thomas {
    fn factor(t: &Tridiag) -> Result<Self> {
        let m = t.diag.len();
        let mut c_prime = vec![0.0; m];
        let mut denom = vec![0.0; m];
        for k in 0..m {
            let d = t.diag[k] - if k > 0 { t.lower[k] * c_prime[k - 1] } else { 0.0 };
            if !(d.abs() > 1e-300) || !d.is_finite() {
                return Err(Error::LinearSolveFailure(format!("zero pivot at row {k}")));
            }
            denom[k] = d;
            c_prime[k] = t.upper[k] / d;
        }
        Ok(Self {
            lower: t.lower.clone(),
            c_prime,
            denom,
        })
    }

    fn solve(&self, rhs: &[Complex]) -> Vec<Complex> {
        let m = rhs.len();
        let mut x = vec![Complex::new(0.0, 0.0); m];
        for k in 0..m {
            let prev = if k > 0 { x[k - 1] * self.lower[k] } else { Complex::new(0.0, 0.0) };
            x[k] = (rhs[k] - prev) / self.denom[k];
        }
        for k in (0..m.saturating_sub(1)).rev() {
            let next = x[k + 1] * self.c_prime[k];
            x[k] -= next;
        }
        x
    }
}

/// Discrete spatial operator plus its trapezoid-step factorization.
#[derive(Debug, Clone)]
pub struct Stepper {
    n: usize,
    l: usize,
    grid: RadialGrid,
    dt: f64,
    a: Tridiag,
    /// Coefficient of the boundary value in the last row of the operator.
    boundary_coeff: f64,
    lhs: Thomas,
}

impl Stepper {
    /// Operator with reaction `q(r)` (λ for the plant, `−c` for the target).
    pub fn new(epsilon: f64, q: impl Fn(f64) -> f64, n: usize, l: usize, grid: RadialGrid, dt: f64) -> Result<Self> {
        let m = grid.m_points();
        let h = grid.h();
        let face = |k: usize| (k as f64 * h).powi(n as i32 - 1);
        let centrifugal = epsilon * (l * (l + n - 2)) as f64;
        let mut a = Tridiag {
            lower: vec![0.0; m],
            diag: vec![0.0; m],
            upper: vec![0.0; m],
        };
        let mut boundary_coeff = 0.0;
        for k in 0..m {
            let r = grid.node(k);
            let scale = epsilon / (r.powi(n as i32 - 1) * h * h);
            // zero flux through r = 0
            let inner = if k == 0 { 0.0 } else { face(k) };
            let outer = face(k + 1);
            a.lower[k] = scale * inner;
            if k + 1 < m {
                a.upper[k] = scale * outer;
                a.diag[k] = -scale * (inner + outer);
            } else {
                // Quadratic ghost u_M = (8U − 6u_{M−1} + u_{M−2})/3. The linear
                // one leaves an O(1) truncation error in this cell, which keeps
                // the boundary flux (and hence the observer) first-order.
                a.lower[k] += scale * outer / 3.0;
                a.diag[k] = -scale * (inner + 3.0 * outer);
                boundary_coeff = 8.0 / 3.0 * scale * outer;
            }
            a.diag[k] += q(r) - centrifugal / (r * r);
        }
        let half = 0.5 * dt;
        let lhs = Tridiag {
            lower: a.lower.iter().map(|v| -half * v).collect(),
            diag: a.diag.iter().map(|v| 1.0 - half * v).collect(),
            upper: a.upper.iter().map(|v| -half * v).collect(),
        };
        let lhs = Thomas::factor(&lhs)?;
        Ok(Self {
            n,
            l,
            grid,
            dt,
            a,
            boundary_coeff,
            lhs,
        })
    }

    pub fn plant(cfg: &SimConfig, n: usize, l: usize) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg.epsilon, |r| cfg.reaction.evaluate(&r), n, l, cfg.grid, cfg.dt)
    }

    pub fn target(cfg: &SimConfig, n: usize, l: usize) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg.epsilon, |_| -cfg.c, n, l, cfg.grid, cfg.dt)
    }

    fn check(&self, u: &ModeState) -> Result<()> {
        if u.values.len() != self.grid.m_points() || u.grid != self.grid {
            return Err(Error::GridMismatch {
                expected: self.grid.m_points(),
                found: u.values.len(),
            });
        }
        if u.n != self.n || u.l != self.l {
            return Err(Error::InvalidParameter {
                name: "state",
                detail: format!("state is (n={}, l={}), stepper is (n={}, l={})", u.n, u.l, self.n, self.l),
            });
        }
        Ok(())
    }

    /// `(I + dt/2 A) u`.
    fn explicit_part(&self, u: &[Complex]) -> Vec<Complex> {
        let half = 0.5 * self.dt;
        let au = self.a.matvec(u);
        u.iter().zip(&au).map(|(x, ax)| x + ax * half).collect()
    }

    /// Right-hand-side contribution of a unit boundary value over one step.
    fn boundary_vector(&self) -> Vec<Complex> {
        let mut e = vec![Complex::new(0.0, 0.0); self.grid.m_points()];
        let last = e.len() - 1;
        e[last] = Complex::new(self.dt * self.boundary_coeff, 0.0);
        e
    }

    fn explicit_rhs(&self, u: &[Complex], boundary: Complex) -> Vec<Complex> {
        let mut rhs = self.explicit_part(u);
        let last = rhs.len() - 1;
        rhs[last] += boundary * (self.dt * self.boundary_coeff);
        rhs
    }

    /// One trapezoid step with the boundary value held over the step.
    pub fn step(&self, u: &ModeState, boundary: Complex) -> Result<ModeState> {
        self.check(u)?;
        let values = self.lhs.solve(&self.explicit_rhs(&u.values, boundary));
        Ok(ModeState {
            values,
            time: u.time + self.dt,
            ..u.clone()
        })
    }
}

/// `(8U − 9u_{M−1} + u_{M−2}) / (3h)`: second-order one-sided `∂_r u(1)`.
pub fn boundary_flux(u: &ModeState, boundary: Complex) -> Complex {
    let m = u.values.len();
    let h = u.grid.h();
    (boundary * 8.0 - u.values[m - 1] * 9.0 + u.values[m - 2]) / (3.0 * h)
}

/// Observer step: the plant step plus injection `p (y − ŷ)`.
///
/// `ŷ` is taken implicitly at both ends of the step through a rank-one
/// (Sherman–Morrison) correction of the tridiagonal solve, because the flux
/// stencil scales like `1/h` and an explicit injection would limit `dt`.
#[derive(Debug, Clone)]
pub struct ObserverStepper {
    base: Stepper,
    p: Vec<f64>,
    /// `(I − dt/2 A)⁻¹ (dt/2) p`.
    z: Vec<Complex>,
    /// `1 + vᵀz`, with `v` the flux stencil on the last two nodes.
    denom: Complex,
}

impl ObserverStepper {
    pub fn new(base: Stepper, gain: &GainTable) -> Result<Self> {
        let m = base.grid.m_points();
        if gain.values.len() != m {
            return Err(Error::GridMismatch {
                expected: m,
                found: gain.values.len(),
            });
        }
        let half = 0.5 * base.dt;
        let rhs: Vec<Complex> = gain.values.iter().map(|p| Complex::new(half * p, 0.0)).collect();
        let z = base.lhs.solve(&rhs);
        let denom = Complex::new(1.0, 0.0) + flux_part(&z, base.grid.h());
        if !(denom.norm() > 1e-12) {
            return Err(Error::LinearSolveFailure("singular injection update".into()));
        }
        Ok(Self {
            p: gain.values.clone(),
            base,
            z,
            denom,
        })
    }

    /// Advance `û` given the plant flux averaged over the step.
    pub fn step(&self, uhat: &ModeState, measured_flux: Complex, boundary: Complex) -> Result<ModeState> {
        let b = &self.base;
        b.check(uhat)?;
        let h = b.grid.h();
        let dt = b.dt;
        let stencil_b = boundary * (8.0 / (3.0 * h));
        let est_start = flux_part(&uhat.values, h);
        let mut rhs = b.explicit_rhs(&uhat.values, boundary);
        // dt·p·(ȳ − d U) − dt/2·p·(vᵀû)
        let drive = (measured_flux - stencil_b) * dt - est_start * (0.5 * dt);
        for (r, p) in rhs.iter_mut().zip(&self.p) {
            *r += drive * *p;
        }
        Ok(ModeState {
            values: self.solve(&rhs),
            time: uhat.time + dt,
            ..uhat.clone()
        })
    }

    /// `(I − dt/2 A + dt/2 p vᵀ)⁻¹ rhs`.
    fn solve(&self, rhs: &[Complex]) -> Vec<Complex> {
        let x = self.base.lhs.solve(rhs);
        let coef = flux_part(&x, self.base.grid.h()) / self.denom;
        x.iter().zip(&self.z).map(|(xi, zi)| xi - zi * coef).collect()
    }
}

fn dot(g: &[f64], x: &[Complex]) -> Complex {
    g.iter().zip(x).map(|(a, b)| b * *a).sum()
}

fn checked_denominator(d: Complex) -> Result<Complex> {
    if d.norm() > 1e-12 && d.re.is_finite() && d.im.is_finite() {
        Ok(d)
    } else {
        Err(Error::LinearSolveFailure("singular feedback update".into()))
    }
}

/// Closed-loop trapezoid step with the feedback `U = ∫K(1,ρ)·(ρ) dρ`
/// taken at both ends of the step, on the plant state (full state) or on
/// the observer (output feedback).
///
/// Lagging `U` by one step leaves Crank–Nicolson's undamped stiff modes
/// exposed to the boundary feedback and diverges on fine grids. With `U`
/// averaged, the boundary couples through one scalar (plus the measured
/// flux for the observer), eliminated exactly from precomputed solves.
#[derive(Debug, Clone)]
struct ClosedLoop {
    plant: Stepper,
    /// Quadrature weights times gain values.
    gains: Vec<f64>,
    /// `T⁻¹ e_b`, the plant response to a unit boundary value.
    zb: Vec<Complex>,
    /// `2 − gᵀ zb`.
    full_denom: Complex,
    observer: Option<ObserverLoop>,
}

#[derive(Debug, Clone)]
struct ObserverLoop {
    st: ObserverStepper,
    /// `S⁻¹ (dt/2) p`: observer response to the plant flux.
    sp: Vec<Complex>,
    /// Observer response to a unit boundary value, including the flux it
    /// causes in the plant.
    s_eff: Vec<Complex>,
    g_sp: Complex,
    /// `2 − gᵀ s_eff`.
    denom: Complex,
}

impl ClosedLoop {
    fn new(plant: Stepper, control: &GainTable, observer: Option<ObserverStepper>) -> Result<Self> {
        let h = plant.grid.h();
        let gains: Vec<f64> = control.weights.iter().zip(&control.values).map(|(w, g)| w * g).collect();
        let eb = plant.boundary_vector();
        let zb = plant.lhs.solve(&eb);
        let vzb = flux_part(&zb, h);
        let full_denom = checked_denominator(Complex::new(2.0, 0.0) - dot(&gains, &zb))?;
        let observer = match observer {
            None => None,
            Some(st) => {
                let half = 0.5 * plant.dt;
                let half_p: Vec<Complex> = st.p.iter().map(|p| Complex::new(half * p, 0.0)).collect();
                let sp = st.solve(&half_p);
                let sb = st.solve(&eb);
                let s_eff: Vec<Complex> = sb.iter().zip(&sp).map(|(b, p)| b + p * vzb).collect();
                let denom = checked_denominator(Complex::new(2.0, 0.0) - dot(&gains, &s_eff))?;
                Some(ObserverLoop {
                    g_sp: dot(&gains, &sp),
                    st,
                    sp,
                    s_eff,
                    denom,
                })
            }
        };
        Ok(Self {
            plant,
            gains,
            zb,
            full_denom,
            observer,
        })
    }

    /// Instantaneous feedback on the state that drives it.
    fn control(&self, u: &ModeState, uhat: Option<&ModeState>) -> Complex {
        dot(&self.gains, &uhat.unwrap_or(u).values)
    }

    fn step(&self, u: &ModeState, uhat: Option<&ModeState>) -> Result<(ModeState, Option<ModeState>)> {
        self.plant.check(u)?;
        let h = self.plant.grid.h();
        let dt = self.plant.dt;
        let x_u = self.plant.lhs.solve(&self.plant.explicit_part(&u.values));
        let advance = |s: &ModeState, values| ModeState {
            values,
            time: s.time + dt,
            ..s.clone()
        };
        match (&self.observer, uhat) {
            (Some(o), Some(est)) => {
                self.plant.check(est)?;
                let phi0 = flux_part(&x_u, h);
                let mut rhs = self.plant.explicit_part(&est.values);
                let inj = (flux_part(&u.values, h) - flux_part(&est.values, h)) * (0.5 * dt);
                for (r, p) in rhs.iter_mut().zip(&o.st.p) {
                    *r += inj * *p;
                }
                let x_o = o.st.solve(&rhs);
                let ubar = (dot(&self.gains, &est.values) + dot(&self.gains, &x_o) + o.g_sp * phi0) / o.denom;
                let plant = x_u.iter().zip(&self.zb).map(|(x, z)| x + z * ubar).collect();
                let obs = x_o
                    .iter()
                    .zip(&o.sp)
                    .zip(&o.s_eff)
                    .map(|((x, p), e)| x + p * phi0 + e * ubar)
                    .collect();
                Ok((advance(u, plant), Some(advance(est, obs))))
            }
            (None, None) => {
                let ubar = (dot(&self.gains, &u.values) + dot(&self.gains, &x_u)) / self.full_denom;
                let plant = x_u.iter().zip(&self.zb).map(|(x, z)| x + z * ubar).collect();
                Ok((advance(u, plant), None))
            }
            _ => Err(Error::InvalidParameter {
                name: "observer",
                detail: "observer state and observer gain must be given together".into(),
            }),
        }
    }
}

/// `vᵀx` for the interior part of the flux stencil.
fn flux_part(x: &[Complex], h: f64) -> Complex {
    let m = x.len();
    (x[m - 2] - x[m - 1] * 9.0) / (3.0 * h)
}

/// Plant step with Dirichlet datum `boundary_value`.
pub fn step_plant(u: &ModeState, cfg: &SimConfig, boundary_value: Complex) -> Result<ModeState> {
    Stepper::plant(cfg, u.n, u.l)?.step(u, boundary_value)
}

/// Observer step; `measured_flux` is the plant flux averaged over the step.
pub fn step_observer(uhat: &ModeState, cfg: &SimConfig, gain: &GainTable, measured_flux: Complex, boundary_value: Complex) -> Result<ModeState> {
    ObserverStepper::new(Stepper::plant(cfg, uhat.n, uhat.l)?, gain)?.step(uhat, measured_flux, boundary_value)
}

/// Lower-triangular quadrature of the kernel transformation on a grid.
#[derive(Debug, Clone)]
pub struct VolterraTransform {
    grid: RadialGrid,
    rows: Vec<Vec<f64>>,
}

impl VolterraTransform {
    /// Weight `h` for `j < k` and `h/2` on the diagonal, where the
    /// integration interval `[0, r_k]` ends.
    pub fn new(k: &KernelCoefficients<f64>, grid: RadialGrid) -> Result<Self> {
        let h = grid.h();
        let rows = (0..grid.m_points())
            .map(|i| {
                let r = grid.node(i);
                (0..=i)
                    .map(|j| {
                        let w = if j == i { 0.5 * h } else { h };
                        Ok(k.evaluate_k(&r, &grid.node(j))? * w)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, rows })
    }

    pub fn apply(&self, u: &ModeState) -> Result<ModeState> {
        if u.grid != self.grid {
            return Err(Error::GridMismatch {
                expected: self.grid.m_points(),
                found: u.values.len(),
            });
        }
        let values = self
            .rows
            .iter()
            .zip(&u.values)
            .map(|(row, uk)| uk - row.iter().zip(&u.values).map(|(a, x)| x * *a).sum::<Complex>())
            .collect();
        Ok(ModeState {
            values,
            ..u.clone()
        })
    }
}

/// `w(r) = u(r) − ∫₀^r K(r,ρ) u(ρ) dρ` on the state's grid.
pub fn transform_state(u: &ModeState, k: &KernelCoefficients<f64>) -> Result<ModeState> {
    VolterraTransform::new(k, u.grid)?.apply(u)
}

struct Recorder {
    every: usize,
    steps: usize,
    snapshot_steps: Vec<usize>,
}

impl Recorder {
    fn sample(&self, step: usize) -> bool {
        step % self.every == 0 || step == self.steps
    }
    fn snapshot(&self, step: usize) -> bool {
        self.snapshot_steps.contains(&step)
    }
}

/// Simulate a single harmonic.
///
/// `kernel` enables feedback for the closed-loop modes; without it the mode
/// runs with `U = 0`. `observer_initial` defaults to the plant's initial
/// state (zero estimation error).
pub fn simulate_mode(
    cfg: &SimConfig,
    kernel: Option<&KernelCoefficients<f64>>,
    initial: &ModeState,
    observer_initial: Option<&ModeState>,
) -> Result<SimReport> {
    cfg.validate()?;
    let (n, l) = (initial.n, initial.l);
    if initial.grid != cfg.grid || initial.values.len() != cfg.grid.m_points() {
        return Err(Error::GridMismatch {
            expected: cfg.grid.m_points(),
            found: initial.values.len(),
        });
    }
    let nodes = cfg.grid.nodes();
    let stepper = match cfg.loop_mode {
        LoopMode::Target => Stepper::target(cfg, n, l)?,
        _ => Stepper::plant(cfg, n, l)?,
    };
    let feedback = matches!(cfg.loop_mode, LoopMode::FullState | LoopMode::OutputFeedback);
    let controlled = feedback && kernel.is_some();
    let closed_loop = if feedback {
        let control = match kernel {
            Some(k) => control_gain(k, &nodes)?,
            None => GainTable::zero(GainKind::Control, n, l, &nodes),
        };
        let observer = if cfg.loop_mode == LoopMode::OutputFeedback {
            let p = match kernel {
                Some(k) => observer_gain(k, cfg.epsilon, &nodes)?,
                None => GainTable::zero(GainKind::Observer, n, l, &nodes),
            };
            Some(ObserverStepper::new(stepper.clone(), &p)?)
        } else {
            None
        };
        Some(ClosedLoop::new(stepper.clone(), &control, observer)?)
    } else {
        None
    };
    let has_observer = cfg.loop_mode == LoopMode::OutputFeedback;

    let steps = cfg.steps();
    let rec = Recorder {
        every: cfg.sample_every,
        steps,
        snapshot_steps: cfg
            .snapshot_times
            .iter()
            .map(|t| ((t / cfg.dt).round() as usize).min(steps))
            .collect(),
    };
    let mut report = SimReport {
        n,
        l,
        m: initial.m,
        loop_mode: cfg.loop_mode,
        controlled,
        times: Vec::new(),
        l2_norms: Vec::new(),
        observer_error_norms: has_observer.then(Vec::new),
        control_signal: Vec::new(),
        fitted_decay_rate: None,
        observer_fitted_decay_rate: None,
        probes: Vec::new(),
        observer_probes: Vec::new(),
        snapshots: Vec::new(),
        observer_snapshots: Vec::new(),
        states: Vec::new(),
    };

    let mut u = initial.clone();
    u.time = 0.0;
    let mut uhat = has_observer.then(|| {
        let mut s = observer_initial.cloned().unwrap_or_else(|| initial.clone());
        s.time = 0.0;
        s
    });
    if let Some(s) = &uhat {
        if s.grid != cfg.grid || s.values.len() != cfg.grid.m_points() {
            return Err(Error::GridMismatch {
                expected: cfg.grid.m_points(),
                found: s.values.len(),
            });
        }
    }

    let zero = Complex::new(0.0, 0.0);
    for step in 0..=steps {
        let boundary = match &closed_loop {
            Some(cl) => cl.control(&u, uhat.as_ref()),
            None => zero,
        };
        let t = step as f64 * cfg.dt;
        if rec.sample(step) {
            report.times.push(t);
            report.l2_norms.push(u.norm());
            report.control_signal.push(boundary);
            report.probes.push(cfg.probe_radii.iter().map(|r| u.value_at(*r, boundary)).collect());
            if let (Some(est), Some(errs)) = (&uhat, report.observer_error_norms.as_mut()) {
                errs.push(u.difference(est).norm());
                report
                    .observer_probes
                    .push(cfg.probe_radii.iter().map(|r| est.value_at(*r, boundary)).collect());
            }
            if cfg.record_states {
                report.states.push(u.clone());
            }
        }
        if rec.snapshot(step) {
            report.snapshots.push(u.clone());
            if let Some(est) = &uhat {
                report.observer_snapshots.push(est.clone());
            }
        }
        if step == steps {
            break;
        }
        match &closed_loop {
            Some(cl) => {
                let (next, next_hat) = cl.step(&u, uhat.as_ref())?;
                u = next;
                uhat = next_hat;
            }
            None => u = stepper.step(&u, zero)?,
        }
        if u.values.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return Err(Error::LinearSolveFailure(format!(
                "non-finite state for l = {l} at t = {}",
                u.time
            )));
        }
    }
    report.fitted_decay_rate = fit_decay_rate(&report.times, &report.l2_norms);
    report.observer_fitted_decay_rate = report
        .observer_error_norms
        .as_ref()
        .and_then(|e| fit_decay_rate(&report.times, e));
    Ok(report)
}

/// Per-mode initial data for [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub plant: ModeState,
    pub observer: Option<ModeState>,
}

/// Run every mode in `initial` in parallel.
///
/// Degrees the plan marks as controlled need a kernel in closed loop;
/// the others run with `U = 0` and a zero injection gain.
pub fn simulate(
    cfg: &SimConfig,
    kernels: &BTreeMap<usize, KernelCoefficients<f64>>,
    plan: &ModePlan,
    initial: &BTreeMap<(usize, i64), InitialCondition>,
) -> Result<BTreeMap<(usize, i64), SimReport>> {
    cfg.validate()?;
    let feedback = matches!(cfg.loop_mode, LoopMode::FullState | LoopMode::OutputFeedback);
    for &(l, _) in initial.keys() {
        if feedback && plan.is_controlled(l) && !kernels.contains_key(&l) {
            return Err(Error::MissingKernel(l));
        }
    }
    initial
        .par_iter()
        .map(|(&key, ic)| {
            let kernel = if plan.is_controlled(key.0) { kernels.get(&key.0) } else { None };
            simulate_mode(cfg, kernel, &ic.plant, ic.observer.as_ref()).map(|r| (key, r))
        })
        .collect()
}
