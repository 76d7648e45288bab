//! Which harmonic degrees need feedback, and the decay rates to expect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::EvenPowerSeries;

/// Interior sample count used to bound `sup λ` on `[0, 1]`.
pub const SUP_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePlan {
    pub n: usize,
    /// Smallest degree that is open-loop stable by the energy criterion.
    pub l_cutoff: usize,
    /// `0..l_cutoff`.
    pub controlled_degrees: Vec<usize>,
    /// Guaranteed open-loop rate of `‖u‖²` for every `l ≥ l_cutoff`.
    pub predicted_d1: f64,
    /// Guaranteed rate of `‖w‖²` for the target system.
    pub predicted_d2: f64,
    /// `min(d1, d2)`.
    pub predicted_rate: f64,
    pub reaction_sup: f64,
}

impl ModePlan {
    /// Plan for the physical reaction `lambda` (without `c`) on the unit ball.
    pub fn new(lambda: &EvenPowerSeries<f64>, c: f64, epsilon: f64, n: usize) -> Result<Self> {
        let reaction_sup = reaction_supremum(lambda);
        let l_cutoff = unstable_mode_bound(reaction_sup, epsilon, n)?;
        let predicted_d2 = target_decay_rate(c, epsilon)?;
        let predicted_d1 = open_loop_rate(l_cutoff, reaction_sup, epsilon, n);
        Ok(Self {
            n,
            l_cutoff,
            controlled_degrees: (0..l_cutoff).collect(),
            predicted_d1,
            predicted_d2,
            predicted_rate: predicted_d1.min(predicted_d2),
            reaction_sup,
        })
    }

    pub fn is_controlled(&self, l: usize) -> bool {
        l < self.l_cutoff
    }
}

/// Smallest `l` with `ε l(l+n−2) > sup λ`; `0` when `sup λ ≤ 0`.
///
/// On the unit ball `1/r² ≥ 1`, so the centrifugal term then dominates the
/// reaction in the `L²` energy estimate for every degree from `l` on.
pub fn unstable_mode_bound(reaction_sup: f64, epsilon: f64, n: usize) -> Result<usize> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveDiffusion(epsilon));
    }
    if n < 2 {
        return Err(Error::InvalidParameter {
            name: "n",
            detail: format!("ball dimension must be at least 2, got {n}"),
        });
    }
    if !reaction_sup.is_finite() {
        return Err(Error::InvalidParameter {
            name: "reaction_sup",
            detail: format!("must be finite, got {reaction_sup}"),
        });
    }
    if reaction_sup <= 0.0 {
        return Ok(0);
    }
    let mut l = 0usize;
    while epsilon * (l * (l + n - 2)) as f64 <= reaction_sup {
        l += 1;
    }
    Ok(l)
}

/// `D₂ = 2c + ε/2`, the guaranteed decay rate of `‖w‖²` on the unit ball.
pub fn target_decay_rate(c: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::NonPositiveDiffusion(epsilon));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "c",
            detail: format!("target damping must be nonnegative, got {c}"),
        });
    }
    Ok(2.0 * c + 0.5 * epsilon)
}

/// Energy-estimate rate `2(ε l(l+n−2) − sup λ)` for `‖u‖²`, floored at zero.
pub fn open_loop_rate(l: usize, reaction_sup: f64, epsilon: f64, n: usize) -> f64 {
    let centrifugal = epsilon * (l * (l + n - 2)) as f64;
    (2.0 * (centrifugal - reaction_sup)).max(0.0)
}

/// `sup_{r∈[0,1]} λ(r)` by dense sampling plus both endpoints.
pub fn reaction_supremum(lambda: &EvenPowerSeries<f64>) -> f64 {
    (0..=SUP_SAMPLES + 1)
        .map(|i| lambda.evaluate(&(i as f64 / (SUP_SAMPLES + 1) as f64)))
        .fold(f64::NEG_INFINITY, f64::max)
}
