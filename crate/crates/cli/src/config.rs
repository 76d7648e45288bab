//! Run configuration: one JSON document, validated and rescaled to the unit
//! ball on load.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use nball_core::experiment::{InitialLaw, Problem};
use nball_core::kernel::{DEFAULT_ORDER, DEFAULT_ORDER_CAP};
use nball_core::radial::{LoopMode, RadialGrid};
use nball_core::series::{validate_even, EvenPowerSeries, RawSeries, DEFAULT_EVENNESS_TOLERANCE};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 20_240_617;
pub const DEFAULT_OUT_DIR: &str = "nball-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Physical problem. Give λ either as even coefficients (of `r^{2i}`) or as
/// mixed-parity coefficients (of `r^i`), which are checked for evenness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub n: usize,
    #[serde(default = "unit")]
    pub radius: f64,
    pub epsilon: f64,
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_even_coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_coeffs: Option<Vec<f64>>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub order: usize,
    /// Bound on the boundary and constraint residuals checked by `kernel`.
    pub tolerance: f64,
    pub evenness_tolerance: f64,
    pub max_order: usize,
    /// Degrees to solve; defaults to the plan's controlled degrees.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degrees: Option<Vec<usize>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            tolerance: 1e-8,
            evenness_tolerance: DEFAULT_EVENNESS_TOLERANCE,
            max_order: DEFAULT_ORDER_CAP,
            degrees: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSpec {
    pub mean: f64,
    pub amplitude: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        let law = InitialLaw::default();
        Self {
            mean: law.mean,
            amplitude: law.amplitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverNoise {
    /// Pointwise variance of the initial observer error field.
    pub variance: f64,
    /// Separate stream for the observer error; otherwise drawn after the
    /// plant's initial field from the main seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ObserverNoise {
    fn default() -> Self {
        Self {
            variance: 0.5,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub grid_points: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Horizon of the open-loop run in `reproduce-paper`.
    pub open_loop_t_end: f64,
    #[serde(rename = "loop")]
    pub loop_mode: LoopMode,
    pub band_limit: usize,
    pub initial: InitialSpec,
    pub seed: u64,
    pub observer_noise: ObserverNoise,
    pub sample_every: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            grid_points: 200,
            dt: 1e-4,
            t_end: 2.0,
            open_loop_t_end: 0.2,
            loop_mode: LoopMode::OutputFeedback,
            band_limit: 12,
            initial: InitialSpec::default(),
            seed: DEFAULT_SEED,
            observer_noise: ObserverNoise::default(),
            sample_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

impl RunConfig {
    /// `ε = 1`, `c = 3`, `λ = 50 + 50r² + 10r⁴` on the unit 3-ball.
    pub fn three_ball() -> Self {
        Self {
            problem: ProblemConfig {
                n: 3,
                radius: 1.0,
                epsilon: 1.0,
                c: 3.0,
                lambda_even_coeffs: Some(vec![50.0, 50.0, 10.0]),
                lambda_coeffs: None,
            },
            solver: SolverConfig::default(),
            sim: SimSection::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Problem on the unit ball: `ε/R²` and `λ_i R^{2i}`.
    pub fn problem(&self) -> Result<Problem, CliError> {
        let p = &self.problem;
        let r = p.radius;
        if !(r > 0.0) || !r.is_finite() {
            return Err(CliError::Config(format!("radius must be positive and finite, got {r}")));
        }
        let physical = match (&p.lambda_even_coeffs, &p.lambda_coeffs) {
            (Some(even), None) => EvenPowerSeries::new(even.clone()),
            (None, Some(raw)) => validate_even(&RawSeries::new(raw.clone()), self.solver.evenness_tolerance)?,
            _ => {
                return Err(CliError::Config(
                    "give exactly one of problem.lambda_even_coeffs and problem.lambda_coeffs".into(),
                ))
            }
        };
        if physical.coeffs().iter().any(|x| !x.is_finite()) || !p.epsilon.is_finite() || !p.c.is_finite() {
            return Err(CliError::Config("problem parameters must be finite".into()));
        }
        let r2 = r * r;
        let lambda = physical
            .coeffs()
            .iter()
            .enumerate()
            .map(|(i, x)| x * r2.powi(i as i32))
            .collect();
        Ok(Problem {
            n: p.n,
            epsilon: p.epsilon / r2,
            c: p.c,
            lambda: EvenPowerSeries::new(lambda),
        })
    }

    pub fn grid(&self) -> Result<RadialGrid, CliError> {
        Ok(RadialGrid::new(self.sim.grid_points)?)
    }

    pub fn initial_law(&self) -> InitialLaw {
        InitialLaw {
            mean: self.sim.initial.mean,
            amplitude: self.sim.initial.amplitude,
        }
    }
}
