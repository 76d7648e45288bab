//! Multi-mode experiment plumbing: kernels for every controlled degree,
//! seeded random initial fields and observer errors, and merged norms.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::admissible_modes;
use crate::kernel::{solve_kernel, KernelCoefficients};
use crate::modes::ModePlan;
use crate::radial::{InitialCondition, ModeState, RadialGrid, SimReport};
use crate::series::{reaction_series, EvenPowerSeries};
use crate::Complex;

/// Reaction–diffusion problem on the unit ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub n: usize,
    pub epsilon: f64,
    pub c: f64,
    /// Physical λ(r) as even coefficients.
    pub lambda: EvenPowerSeries<f64>,
}

impl Problem {
    /// `ε = 1`, `c = 3`, `λ(r) = 50 + 50r² + 10r⁴` on the 3-ball.
    pub fn three_ball_example() -> Self {
        Self {
            n: 3,
            epsilon: 1.0,
            c: 3.0,
            lambda: EvenPowerSeries::new(vec![50.0, 50.0, 10.0]),
        }
    }

    /// `(λ + c)/ε` as consumed by the kernel solver.
    pub fn reaction(&self) -> Result<EvenPowerSeries<f64>> {
        let s = reaction_series(self.lambda.coeffs(), self.c, self.epsilon)?;
        Ok(EvenPowerSeries::with_radius_hint(s.coeffs().to_vec(), self.lambda.radius_hint()))
    }

    pub fn plan(&self) -> Result<ModePlan> {
        ModePlan::new(&self.lambda, self.c, self.epsilon, self.n)
    }
}

/// Kernels for `degrees`, solved in parallel.
pub fn solve_kernels(
    problem: &Problem,
    degrees: &[usize],
    order: usize,
) -> Result<BTreeMap<usize, KernelCoefficients<f64>>> {
    let s = problem.reaction()?;
    degrees
        .par_iter()
        .map(|&l| solve_kernel(&s, problem.n, l, order).map(|k| (l, k)))
        .collect()
}

fn check_field_dimension(n: usize) -> Result<()> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "n",
            detail: format!("random fields need n = 2 or 3, got {n}"),
        })
    }
}

/// Surface measure of `S^{n−1}`.
fn sphere_area(n: usize) -> f64 {
    if n == 2 {
        2.0 * PI
    } else {
        4.0 * PI
    }
}

/// Factor relating `c_{l,−m}` to `conj(c_{l,m})` for a real field.
fn reflection_sign(n: usize, m: i64) -> f64 {
    if n == 3 && m % 2 != 0 {
        -1.0
    } else {
        1.0
    }
}

/// One draw of `K` complex numbers per mode with `m ≥ 0`, reflected to
/// `m < 0` so the synthesized field is real.
fn draw_symmetric<const K: usize>(
    n: usize,
    s: usize,
    mut draw: impl FnMut(usize, bool) -> [Complex; K],
) -> BTreeMap<(usize, i64), [Complex; K]> {
    let mut out = BTreeMap::new();
    for (l, m) in admissible_modes(n, s) {
        if m < 0 {
            continue;
        }
        let c = draw(l, m == 0);
        out.insert((l, m), c);
        if m > 0 {
            let sgn = reflection_sign(n, m);
            out.insert((l, -m), c.map(|z| z.conj() * sgn));
        }
    }
    out
}

/// Law of the random initial field
/// `u₀ = mean + a Σ r^l (α_lm + β_lm r²) Y_lm`.
///
/// `α, β` have independent uniform real and imaginary parts on `[−1, 1]`
/// (real for `m = 0`). The scale `a` makes the worst-case bound
/// `Σ max_r|r^l(α+βr²)| · max|Y_lm|` equal `amplitude`, which keeps the
/// field inside `[mean − amplitude, mean + amplitude]` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    pub mean: f64,
    pub amplitude: f64,
}

impl Default for InitialLaw {
    /// Fields in `[0, 10]`.
    fn default() -> Self {
        Self {
            mean: 5.0,
            amplitude: 5.0,
        }
    }
}

/// `max |Y_lm|` bound `√((2l+1)/area)`, exact for `m = 0` at the poles.
fn harmonic_bound(n: usize, l: usize) -> f64 {
    if n == 2 {
        1.0 / sphere_area(2).sqrt()
    } else {
        ((2 * l + 1) as f64 / sphere_area(3)).sqrt()
    }
}

impl InitialLaw {
    pub fn description(&self) -> String {
        format!(
            "u0 = {} + a * sum_(l<=S,m) r^l (alpha_lm + beta_lm r^2) Y_lm; alpha, beta with \
             independent U[-1,1] real and imaginary parts (real for m=0), conjugate-symmetric in m; \
             a chosen so the worst-case oscillation bound is {}, hence u0 in [{}, {}]",
            self.mean,
            self.amplitude,
            self.mean - self.amplitude,
            self.mean + self.amplitude
        )
    }

    /// Per-mode initial states; draws are sequential in `(l, m ≥ 0)` order.
    pub fn sample(
        &self,
        n: usize,
        s: usize,
        grid: RadialGrid,
        rng: &mut ChaCha8Rng,
    ) -> Result<BTreeMap<(usize, i64), ModeState>> {
        check_field_dimension(n)?;
        let coeffs = draw_symmetric::<2>(n, s, |_, real| {
            let mut unit = || {
                let re = rng.random_range(-1.0..=1.0);
                let im = if real { 0.0 } else { rng.random_range(-1.0..=1.0) };
                Complex::new(re, im)
            };
            [unit(), unit()]
        });
        // max over r ∈ [0,1] of |α + βr²| is attained at an endpoint or never
        // exceeds |α| + |β|; use the cheap bound.
        let bound: f64 = coeffs
            .iter()
            .map(|(&(l, _), [a, b])| (a.norm() + b.norm()) * harmonic_bound(n, l))
            .sum();
        let scale = if bound > 0.0 { self.amplitude / bound } else { 0.0 };
        let mean_coeff = self.mean * sphere_area(n).sqrt();
        Ok(coeffs
            .into_iter()
            .map(|((l, m), [a, b])| {
                let offset = if l == 0 { mean_coeff } else { 0.0 };
                let state = ModeState::from_fn(n, l, m, grid, |r| {
                    (a + b * (r * r)) * (scale * r.powi(l as i32)) + offset
                });
                ((l, m), state)
            })
            .collect())
    }
}

/// Variance of each harmonic coefficient of the observer error `e_lm r^l`,
/// so that the pointwise variance averaged over the ball is `sigma2`.
///
/// Averaging `r^{2l}` over the n-ball gives `n/(2l+n)` and `Σ_m |Y_lm|²`
/// contributes `1/area` per mode.
pub fn observer_mode_variance(n: usize, s: usize, sigma2: f64) -> f64 {
    let per_unit: f64 = admissible_modes(n, s)
        .iter()
        .map(|&(l, _)| n as f64 / ((2 * l + n) as f64 * sphere_area(n)))
        .sum();
    sigma2 / per_unit
}

/// Zero-mean Gaussian observer errors `ũ_lm(r) = e_lm r^l`, real field.
pub fn sample_observer_error(
    n: usize,
    s: usize,
    grid: RadialGrid,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<(usize, i64), ModeState>> {
    check_field_dimension(n)?;
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter {
            name: "observer variance",
            detail: format!("must be finite and nonnegative, got {sigma2}"),
        });
    }
    let v = observer_mode_variance(n, s, sigma2);
    let full = Normal::new(0.0, v.sqrt()).expect("finite deviation");
    let half = Normal::new(0.0, (0.5 * v).sqrt()).expect("finite deviation");
    let coeffs = draw_symmetric::<1>(n, s, |_, real| {
        if real {
            [Complex::new(full.sample(rng), 0.0)]
        } else {
            [Complex::new(half.sample(rng), half.sample(rng))]
        }
    });
    Ok(coeffs
        .into_iter()
        .map(|((l, m), [e])| ((l, m), ModeState::from_fn(n, l, m, grid, |r| e * r.powi(l as i32))))
        .collect())
}

/// Pair plant states with observer states `û = u − ũ`.
pub fn initial_conditions(
    plant: BTreeMap<(usize, i64), ModeState>,
    observer_error: Option<&BTreeMap<(usize, i64), ModeState>>,
) -> Result<BTreeMap<(usize, i64), InitialCondition>> {
    plant
        .into_iter()
        .map(|(key, u)| {
            let observer = match observer_error {
                None => None,
                Some(errs) => {
                    let e = errs.get(&key).ok_or_else(|| {
                        Error::BandLimitMismatch(format!("no observer error for mode {key:?}"))
                    })?;
                    if e.values.len() != u.values.len() {
                        return Err(Error::GridMismatch {
                            expected: u.values.len(),
                            found: e.values.len(),
                        });
                    }
                    Some(ModeState {
                        values: u.values.iter().zip(&e.values).map(|(a, b)| a - b).collect(),
                        ..u.clone()
                    })
                }
            };
            Ok((key, InitialCondition { plant: u, observer }))
        })
        .collect()
}

/// Norm series merged over all modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedSeries {
    pub times: Vec<f64>,
    /// Mean over modes of the per-mode weighted norm.
    pub mean_norm: Vec<f64>,
    /// `(Σ ‖u_lm‖²)^{1/2}`, the field's `L²` norm over the ball.
    pub total_norm: Vec<f64>,
    pub observer_error_mean: Option<Vec<f64>>,
    pub observer_error_total: Option<Vec<f64>>,
}

impl MergedSeries {
    pub fn from_reports(reports: &BTreeMap<(usize, i64), SimReport>) -> Result<Self> {
        let first = reports
            .values()
            .next()
            .ok_or_else(|| Error::InvalidParameter {
                name: "reports",
                detail: "nothing to merge".into(),
            })?;
        let len = first.times.len();
        if reports.values().any(|r| r.times.len() != len) {
            return Err(Error::GridMismatch {
                expected: len,
                found: reports.values().map(|r| r.times.len()).find(|l| *l != len).unwrap_or(len),
            });
        }
        let count = reports.len() as f64;
        let merge = |pick: &dyn Fn(&SimReport) -> Option<&Vec<f64>>| -> Option<(Vec<f64>, Vec<f64>)> {
            let series: Vec<&Vec<f64>> = reports.values().map(pick).collect::<Option<_>>()?;
            let mean = (0..len).map(|i| series.iter().map(|s| s[i]).sum::<f64>() / count).collect();
            let total = (0..len)
                .map(|i| series.iter().map(|s| s[i] * s[i]).sum::<f64>().sqrt())
                .collect();
            Some((mean, total))
        };
        let (mean_norm, total_norm) = merge(&|r| Some(&r.l2_norms)).expect("norms are always present");
        let obs = merge(&|r| r.observer_error_norms.as_ref());
        Ok(Self {
            times: first.times.clone(),
            mean_norm,
            total_norm,
            observer_error_mean: obs.as_ref().map(|o| o.0.clone()),
            observer_error_total: obs.map(|o| o.1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::{synthesize_states, AngularGrid};
    use rand::SeedableRng;

    #[test]
    fn example_problem_plan() {
        let p = Problem::three_ball_example();
        assert_eq!(p.reaction().unwrap().coeffs(), &[53.0, 50.0, 10.0]);
        let plan = p.plan().unwrap();
        assert_eq!(plan.l_cutoff, 11);
        let ks = solve_kernels(&p, &plan.controlled_degrees, 15).unwrap();
        assert_eq!(ks.keys().copied().collect::<Vec<_>>(), (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn gain_magnitude_decreases_with_degree() {
        let p = Problem::three_ball_example();
        let ks = solve_kernels(&p, &(0..6).collect::<Vec<_>>(), 15).unwrap();
        let peak = |k: &KernelCoefficients<f64>| {
            (1..=200)
                .map(|i| k.evaluate_k(&1.0, &(i as f64 / 200.0)).unwrap().abs())
                .fold(0.0, f64::max)
        };
        let peaks: Vec<f64> = ks.values().map(peak).collect();
        // the boundary value is shared, so compare the L¹ mass instead of peaks
        assert!(peaks.iter().all(|p| *p > 0.0));
        let mass = |k: &KernelCoefficients<f64>| {
            (0..200).map(|i| k.evaluate_k(&1.0, &((i as f64 + 0.5) / 200.0)).unwrap().abs()).sum::<f64>()
        };
        let masses: Vec<f64> = ks.values().map(mass).collect();
        assert!(masses.windows(2).all(|w| w[1] < w[0]), "{masses:?}");
    }

    #[test]
    fn initial_field_stays_in_range() {
        let grid = RadialGrid::new(40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states = InitialLaw::default().sample(3, 6, grid, &mut rng).unwrap();
        assert_eq!(states.len(), 49);
        let ag = AngularGrid::for_band_limit(3, 6).unwrap();
        for r in [0.0125, 0.5, 0.9875] {
            let f = synthesize_states(&states, 6, &ag, r, |_, _| Complex::new(0.0, 0.0)).unwrap();
            for v in f {
                assert!(v.im.abs() < 1e-10);
                assert!((-1e-9..=10.0 + 1e-9).contains(&v.re), "{v}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let grid = RadialGrid::new(10).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = InitialLaw::default().sample(3, 3, grid, &mut rng).unwrap();
            let e = sample_observer_error(3, 3, grid, 0.5, &mut rng).unwrap();
            (u, e)
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5).0, draw(6).0);
    }

    #[test]
    fn observer_error_variance_law() {
        // Monte Carlo: ball-averaged pointwise variance of the error field.
        let n = 3;
        let s = 3;
        let grid = RadialGrid::new(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 400;
        let mut acc = 0.0;
        for _ in 0..trials {
            let e = sample_observer_error(n, s, grid, 0.5, &mut rng).unwrap();
            // ∫_ball |ũ|² = Σ_lm ‖ũ_lm‖²
            acc += e.values().map(|m| m.norm().powi(2)).sum::<f64>();
        }
        let ball_volume = 4.0 * PI / 3.0;
        let mean_var = acc / trials as f64 / ball_volume;
        assert!((mean_var - 0.5).abs() < 0.06, "{mean_var}");
    }

    #[test]
    fn observer_state_is_plant_minus_error() {
        let grid = RadialGrid::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = InitialLaw::default().sample(2, 2, grid, &mut rng).unwrap();
        let e = sample_observer_error(2, 2, grid, 0.5, &mut rng).unwrap();
        let ic = initial_conditions(u.clone(), Some(&e)).unwrap();
        for (k, c) in &ic {
            let obs = c.observer.as_ref().unwrap();
            for i in 0..10 {
                assert_eq!(obs.values[i], u[k].values[i] - e[k].values[i]);
            }
        }
        let ic = initial_conditions(u, None).unwrap();
        assert!(ic.values().all(|c| c.observer.is_none()));
    }
}
