//! The subcommands. Each returns a short report for stdout; artifacts go
//! through [`Output`].

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use nball_core::experiment::{initial_conditions, sample_observer_error, MergedSeries, Problem};
use nball_core::gains::{control_gain, observer_gain};
use nball_core::harmonics::{field_csv, harmonic, synthesize_states, AngularGrid};
use nball_core::json::{fmt17, to_string_pretty};
use nball_core::kernel::{pde_residual, solve_kernel_capped};
use nball_core::modes::ModePlan;
use nball_core::radial::{simulate, LoopMode, ModeState, SimConfig, SimReport};
use nball_core::{Complex, Kernel};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::Output;

type Modes<T> = BTreeMap<(usize, i64), T>;

/// Radii of the point traces.
pub const TRACE_RADII: [f64; 4] = [0.002, 0.3, 0.5, 0.8];
/// `(θ₁, θ₂)` directions of the point traces.
pub const TRACE_DIRECTIONS: [(f64, f64); 2] = [(PI, 0.0), (PI, PI / 4.0)];
/// Radii of the exported angular fields.
pub const FIELD_RADII: [f64; 2] = [0.5, 0.9];
pub const OPEN_LOOP_SNAPSHOTS: [f64; 3] = [0.0, 0.18, 0.2];
pub const CLOSED_LOOP_SNAPSHOTS: [f64; 4] = [0.1, 0.2, 0.4, 2.0];
/// Azimuths `θ₂` of the control-effort profiles.
pub const EFFORT_AZIMUTHS: [f64; 2] = [PI / 4.0, 3.0 * PI / 8.0];
/// Polar samples of the control-effort profiles over `[0, π]`.
pub const EFFORT_POLAR_SAMPLES: usize = 37;

/// Resolved inputs shared by all commands.
pub struct Context {
    pub config: RunConfig,
    pub problem: Problem,
    pub plan: ModePlan,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let problem = config.problem()?;
        // Reject bad reactions before any planning.
        problem.reaction()?;
        let plan = problem.plan()?;
        Ok(Self { config, problem, plan })
    }
}

// ---------------------------------------------------------------- modeplan

pub fn modeplan(ctx: &Context, out: &mut Output) -> Result<String, CliError> {
    let text = to_string_pretty(&ctx.plan);
    out.json("plan.json", &text)?;
    Ok(text)
}

// ------------------------------------------------------------------ kernel

#[derive(Debug, Clone, Serialize)]
pub struct KernelResidual {
    pub l: usize,
    pub order: usize,
    pub max_boundary_residual: f64,
    pub max_pde_residual: f64,
    pub max_row_sum_residual: f64,
    pub max_recurrence_residual: f64,
    pub per_degree_residuals: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualSummary {
    pub tolerance: f64,
    pub pass: bool,
    pub kernels: Vec<KernelResidual>,
}

fn solve(ctx: &Context, degrees: &[usize]) -> Result<BTreeMap<usize, Kernel>, CliError> {
    let s = ctx.problem.reaction()?;
    let solver = &ctx.config.solver;
    Ok(degrees
        .par_iter()
        .map(|&l| solve_kernel_capped(&s, ctx.problem.n, l, solver.order, solver.max_order).map(|k| (l, k)))
        .collect::<nball_core::Result<_>>()?)
}

fn residuals(ctx: &Context, kernels: &BTreeMap<usize, Kernel>) -> Result<ResidualSummary, CliError> {
    let s = ctx.problem.reaction()?;
    let tol = ctx.config.solver.tolerance;
    let kernels: Vec<KernelResidual> = kernels
        .par_iter()
        .map(|(&l, k)| {
            let pde = pde_residual(k, &s);
            let rows = k.constraint_residuals(&s);
            let row_sum = rows.iter().map(|r| r.row_sum).fold(0.0, f64::max);
            let recurrence = rows.iter().map(|r| r.recurrence).fold(0.0, f64::max);
            KernelResidual {
                l,
                order: k.order(),
                max_boundary_residual: pde.max_boundary_residual,
                max_pde_residual: pde.max_pde_residual,
                max_row_sum_residual: row_sum,
                max_recurrence_residual: recurrence,
                per_degree_residuals: pde.per_degree_residuals,
                pass: pde.max_boundary_residual <= tol && row_sum <= tol && recurrence <= tol,
            }
        })
        .collect();
    Ok(ResidualSummary {
        tolerance: tol,
        pass: kernels.iter().all(|k| k.pass),
        kernels,
    })
}

fn write_kernels(
    ctx: &Context,
    kernels: &BTreeMap<usize, Kernel>,
    out: &mut Output,
) -> Result<ResidualSummary, CliError> {
    for (l, k) in kernels {
        out.json(format!("kernels/kernel_l{l}.json"), &k.to_json())?;
    }
    let summary = residuals(ctx, kernels)?;
    out.json("residuals.json", &to_string_pretty(&summary))?;
    out.json("plan.json", &to_string_pretty(&ctx.plan))?;
    Ok(summary)
}

fn residual_failure(summary: &ResidualSummary) -> CliError {
    let bad: Vec<String> = summary.kernels.iter().filter(|k| !k.pass).map(|k| k.l.to_string()).collect();
    CliError::Residual(format!(
        "kernels for l = {} exceed tolerance {:e}",
        bad.join(", "),
        summary.tolerance
    ))
}

fn kernel_degrees(ctx: &Context) -> Vec<usize> {
    ctx.config
        .solver
        .degrees
        .clone()
        .unwrap_or_else(|| ctx.plan.controlled_degrees.clone())
}

pub fn kernel(ctx: &Context, out: &mut Output) -> Result<String, CliError> {
    let kernels = solve(ctx, &kernel_degrees(ctx))?;
    let summary = write_kernels(ctx, &kernels, out)?;
    if !summary.pass {
        return Err(residual_failure(&summary));
    }
    let worst = summary.kernels.iter().map(|k| k.max_boundary_residual).fold(0.0, f64::max);
    Ok(format!(
        "{} kernels (order {}), worst boundary residual {worst:.3e}, all within {:e}",
        kernels.len(),
        ctx.config.solver.order,
        summary.tolerance
    ))
}

// ---------------------------------------------------------------- simulate

/// One multi-mode run and the data needed to export it.
struct Run {
    reports: Modes<SimReport>,
    merged: MergedSeries,
    /// Snapshot times actually recorded, ascending.
    snapshot_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct ModeSummary {
    l: usize,
    m: i64,
    controlled: bool,
    initial_norm: f64,
    final_norm: f64,
    fitted_decay_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_observer_error_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_observer_error_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observer_fitted_decay_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary<'a> {
    loop_mode: LoopMode,
    seed: u64,
    initial_law: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    observer_law: Option<String>,
    grid_points: usize,
    dt: f64,
    t_end: f64,
    band_limit: usize,
    plan: &'a ModePlan,
    final_mean_norm: f64,
    final_total_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_observer_error_total: Option<f64>,
    modes: Vec<ModeSummary>,
}

fn observer_law(ctx: &Context) -> String {
    let noise = &ctx.config.sim.observer_noise;
    let stream = match noise.seed {
        Some(s) => format!("own stream, seed {s}"),
        None => "main stream after the plant draws".into(),
    };
    format!(
        "u0 - uhat0 = sum_(l<=S,m) e_lm r^l Y_lm; e_lm complex Gaussian, conjugate-symmetric in m, \
         per-mode variance chosen so the pointwise variance averaged over the ball is {}; {stream}",
        noise.variance
    )
}

/// Snapshot times within the horizon, deduplicated after snapping to steps.
fn snapshot_schedule(times: &[f64], t_end: f64, dt: f64) -> Vec<f64> {
    let steps = (t_end / dt).round() as i64;
    let mut picked: Vec<(i64, f64)> = Vec::new();
    for &t in times {
        let s = (t / dt).round() as i64;
        if s <= steps && !picked.iter().any(|p| p.0 == s) {
            picked.push((s, t));
        }
    }
    picked.sort_by_key(|p| p.0);
    picked.into_iter().map(|p| p.1).collect()
}

fn run(
    ctx: &Context,
    kernels: &BTreeMap<usize, Kernel>,
    mode: LoopMode,
    t_end: f64,
    seed: u64,
    snapshots: &[f64],
    probes: &[f64],
) -> Result<Run, CliError> {
    let sim = &ctx.config.sim;
    let grid = ctx.config.grid()?;
    let p = &ctx.problem;
    let mut cfg = SimConfig::new(p.epsilon, p.c, p.lambda.clone(), grid, sim.dt, t_end, mode);
    cfg.sample_every = sim.sample_every;
    cfg.probe_radii = probes.to_vec();
    let snapshot_times = snapshot_schedule(snapshots, t_end, sim.dt);
    cfg.snapshot_times = snapshot_times.clone();
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plant = ctx.config.initial_law().sample(p.n, sim.band_limit, grid, &mut rng)?;
    let errors = if mode == LoopMode::OutputFeedback {
        let noise = &sim.observer_noise;
        let mut own;
        let stream = match noise.seed {
            Some(s) => {
                own = ChaCha8Rng::seed_from_u64(s);
                &mut own
            }
            None => &mut rng,
        };
        Some(sample_observer_error(p.n, sim.band_limit, grid, noise.variance, stream)?)
    } else {
        None
    };
    let ic = initial_conditions(plant, errors.as_ref())?;
    let reports = simulate(&cfg, kernels, &ctx.plan, &ic)?;
    let merged = MergedSeries::from_reports(&reports)?;
    Ok(Run {
        reports,
        merged,
        snapshot_times,
    })
}

fn closed_loop_kernels(ctx: &Context, mode: LoopMode) -> Result<BTreeMap<usize, Kernel>, CliError> {
    if !matches!(mode, LoopMode::FullState | LoopMode::OutputFeedback) {
        return Ok(BTreeMap::new());
    }
    let s = ctx.config.sim.band_limit;
    let degrees: Vec<usize> = kernel_degrees(ctx).into_iter().filter(|l| *l <= s).collect();
    solve(ctx, &degrees)
}

fn summary_json(ctx: &Context, run: &Run, mode: LoopMode, seed: u64, t_end: f64) -> String {
    let sim = &ctx.config.sim;
    let last = |v: &[f64]| *v.last().expect("at least the initial sample");
    let modes = run
        .reports
        .iter()
        .map(|(&(l, m), r)| ModeSummary {
            l,
            m,
            controlled: r.controlled,
            initial_norm: r.l2_norms[0],
            final_norm: last(&r.l2_norms),
            fitted_decay_rate: r.fitted_decay_rate,
            initial_observer_error_norm: r.observer_error_norms.as_ref().map(|e| e[0]),
            final_observer_error_norm: r.observer_error_norms.as_deref().map(last),
            observer_fitted_decay_rate: r.observer_fitted_decay_rate,
        })
        .collect();
    to_string_pretty(&RunSummary {
        loop_mode: mode,
        seed,
        initial_law: ctx.config.initial_law().description(),
        observer_law: (mode == LoopMode::OutputFeedback).then(|| observer_law(ctx)),
        grid_points: sim.grid_points,
        dt: sim.dt,
        t_end,
        band_limit: sim.band_limit,
        plan: &ctx.plan,
        final_mean_norm: last(&run.merged.mean_norm),
        final_total_norm: last(&run.merged.total_norm),
        final_observer_error_total: run.merged.observer_error_total.as_deref().map(last),
        modes,
    })
}

fn merged_csv(m: &MergedSeries) -> String {
    let obs = m.observer_error_mean.as_ref().zip(m.observer_error_total.as_ref());
    let mut out = String::from("time,mean_norm,total_norm");
    if obs.is_some() {
        out.push_str(",observer_error_mean,observer_error_total");
    }
    out.push('\n');
    for i in 0..m.times.len() {
        out.push_str(&format!("{},{},{}", fmt17(m.times[i]), fmt17(m.mean_norm[i]), fmt17(m.total_norm[i])));
        if let Some((mean, total)) = obs {
            out.push_str(&format!(",{},{}", fmt17(mean[i]), fmt17(total[i])));
        }
        out.push('\n');
    }
    out
}

fn mode_name(l: usize, m: i64) -> String {
    format!("mode_l{l}_m{m}")
}

fn write_run(
    ctx: &Context,
    run: &Run,
    mode: LoopMode,
    seed: u64,
    t_end: f64,
    dir: &str,
    out: &mut Output,
) -> Result<(), CliError> {
    out.json(format!("{dir}summary.json"), &summary_json(ctx, run, mode, seed, t_end))?;
    out.csv(format!("{dir}merged.csv"), &merged_csv(&run.merged))?;
    for (&(l, m), r) in &run.reports {
        out.csv(format!("{dir}modes/{}.csv", mode_name(l, m)), &r.trajectory_csv())?;
    }
    Ok(())
}

pub fn simulate_cmd(ctx: &Context, seed: u64, out: &mut Output) -> Result<String, CliError> {
    let sim = &ctx.config.sim;
    let kernels = closed_loop_kernels(ctx, sim.loop_mode)?;
    let run = run(ctx, &kernels, sim.loop_mode, sim.t_end, seed, &[], &[])?;
    write_run(ctx, &run, sim.loop_mode, seed, sim.t_end, "", out)?;
    out.json("plan.json", &to_string_pretty(&ctx.plan))?;
    let first = run.merged.mean_norm[0];
    let last = *run.merged.mean_norm.last().expect("initial sample");
    Ok(format!(
        "{} modes, {} samples; mean norm {} -> {}",
        run.reports.len(),
        run.merged.times.len(),
        fmt17(first),
        fmt17(last)
    ))
}

// --------------------------------------------------------- reproduce-paper

fn gains(ctx: &Context, kernels: &BTreeMap<usize, Kernel>, out: &mut Output) -> Result<(), CliError> {
    let nodes = ctx.config.grid()?.nodes();
    for (l, k) in kernels {
        let kg = control_gain(k, &nodes)?;
        out.csv(format!("gains/control_l{l}.csv"), &kg.to_csv())?;
        out.json(format!("gains/control_l{l}.json"), &kg.sidecar_json())?;
        let pg = observer_gain(k, ctx.problem.epsilon, &nodes)?;
        out.csv(format!("gains/observer_l{l}.csv"), &pg.to_csv())?;
        out.json(format!("gains/observer_l{l}.json"), &pg.sidecar_json())?;
    }
    Ok(())
}

/// Boundary value of each mode at the sample closest to `t`.
fn control_at(r: &SimReport, t: f64) -> Complex {
    r.times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| r.control_signal[i])
        .unwrap_or_default()
}

fn fields(
    ctx: &Context,
    run: &Run,
    observer_error: bool,
    dir: &str,
    out: &mut Output,
) -> Result<(), CliError> {
    let s = ctx.config.sim.band_limit;
    let grid = AngularGrid::for_band_limit(ctx.problem.n, s)?;
    for (k, &t) in run.snapshot_times.iter().enumerate() {
        let states: Modes<ModeState> = run
            .reports
            .iter()
            .map(|(&key, r)| {
                let u = r.snapshots[k].clone();
                if observer_error {
                    let est = &r.observer_snapshots[k];
                    let values = u.values.iter().zip(&est.values).map(|(a, b)| a - b).collect();
                    (key, ModeState { values, ..u })
                } else {
                    (key, u)
                }
            })
            .collect();
        let boundary = |l: usize, m: i64| {
            if observer_error {
                Complex::default()
            } else {
                control_at(&run.reports[&(l, m)], t)
            }
        };
        let name = if observer_error { "error" } else { "u" };
        for r in FIELD_RADII {
            let values = synthesize_states(&states, s, &grid, r, boundary)?;
            out.csv(format!("{dir}fields/{name}_t{t}_r{r}.csv"), &field_csv(&grid, &values))?;
        }
    }
    Ok(())
}

/// Field value at `(r, θ₁, θ₂)` for each sample, from per-mode probe values.
fn traces(ctx: &Context, run: &Run, observer_error: bool) -> String {
    let n = ctx.problem.n;
    let mut out = String::from("time,r,theta1,theta2,value\n");
    for (i, &t) in run.merged.times.iter().enumerate() {
        for (j, &r) in TRACE_RADII.iter().enumerate() {
            for &(a, b) in &TRACE_DIRECTIONS {
                let v: Complex = run
                    .reports
                    .iter()
                    .map(|(&(l, m), rep)| {
                        let mut c = rep.probes[i][j];
                        if observer_error {
                            c -= rep.observer_probes[i][j];
                        }
                        c * harmonic(n, l, m, a, b)
                    })
                    .sum();
                out.push_str(&format!("{},{},{},{},{}\n", fmt17(t), fmt17(r), fmt17(a), fmt17(b), fmt17(v.re)));
            }
        }
    }
    out
}

/// Boundary input `U(t, θ₁, θ₂)` along polar profiles at fixed azimuths.
fn control_effort(ctx: &Context, run: &Run) -> String {
    let n = ctx.problem.n;
    let polar: Vec<f64> = (0..EFFORT_POLAR_SAMPLES)
        .map(|i| PI * i as f64 / (EFFORT_POLAR_SAMPLES - 1) as f64)
        .collect();
    let mut out = String::from("time,theta1,theta2,value\n");
    for (i, &t) in run.merged.times.iter().enumerate() {
        for &b in &EFFORT_AZIMUTHS {
            for &a in &polar {
                let v: Complex = run
                    .reports
                    .iter()
                    .map(|(&(l, m), rep)| rep.control_signal[i] * harmonic(n, l, m, a, b))
                    .sum();
                out.push_str(&format!("{},{},{},{}\n", fmt17(t), fmt17(a), fmt17(b), fmt17(v.re)));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    initial_law: String,
    observer_law: String,
    trace_radii: &'a [f64],
    trace_directions: Vec<[f64; 2]>,
    field_radii: &'a [f64],
    effort_azimuths: &'a [f64],
    open_loop_t_end: f64,
    output_feedback_t_end: f64,
    residuals_pass: bool,
    config: &'a RunConfig,
    plan: &'a ModePlan,
}

pub fn reproduce(ctx: &Context, seed: u64, out: &mut Output) -> Result<String, CliError> {
    let sim = &ctx.config.sim;
    let kernels = solve(ctx, &kernel_degrees(ctx))?;
    let residuals = write_kernels(ctx, &kernels, out)?;
    gains(ctx, &kernels, out)?;

    let open_t = sim.open_loop_t_end;
    let open = run(ctx, &kernels, LoopMode::Open, open_t, seed, &OPEN_LOOP_SNAPSHOTS, &TRACE_RADII)?;
    write_run(ctx, &open, LoopMode::Open, seed, open_t, "open_loop/", out)?;
    fields(ctx, &open, false, "open_loop/", out)?;
    out.csv("open_loop/traces.csv", &traces(ctx, &open, false))?;

    let closed_t = sim.t_end;
    let closed = run(
        ctx,
        &kernels,
        LoopMode::OutputFeedback,
        closed_t,
        seed,
        &CLOSED_LOOP_SNAPSHOTS,
        &TRACE_RADII,
    )?;
    let dir = "output_feedback/";
    write_run(ctx, &closed, LoopMode::OutputFeedback, seed, closed_t, dir, out)?;
    fields(ctx, &closed, false, dir, out)?;
    fields(ctx, &closed, true, dir, out)?;
    out.csv(format!("{dir}traces.csv"), &traces(ctx, &closed, false))?;
    out.csv(format!("{dir}observer_error_traces.csv"), &traces(ctx, &closed, true))?;
    out.csv(format!("{dir}control_effort.csv"), &control_effort(ctx, &closed))?;

    let record = RunRecord {
        seed,
        initial_law: ctx.config.initial_law().description(),
        observer_law: observer_law(ctx),
        trace_radii: &TRACE_RADII,
        trace_directions: TRACE_DIRECTIONS.iter().map(|&(a, b)| [a, b]).collect(),
        field_radii: &FIELD_RADII,
        effort_azimuths: &EFFORT_AZIMUTHS,
        open_loop_t_end: open_t,
        output_feedback_t_end: closed_t,
        residuals_pass: residuals.pass,
        config: &ctx.config,
        plan: &ctx.plan,
    };
    out.json("run.json", &to_string_pretty(&record))?;
    if !residuals.pass {
        return Err(residual_failure(&residuals));
    }

    let ends = |v: &[f64]| (v[0], *v.last().expect("initial sample"));
    let (o0, o1) = ends(&open.merged.mean_norm);
    let (c0, c1) = ends(&closed.merged.mean_norm);
    let mut lines = vec![
        format!("kernels: {} degrees, residuals within {:e}", kernels.len(), residuals.tolerance),
        format!("open loop: mean norm {} -> {} at t = {open_t}", fmt17(o0), fmt17(o1)),
        format!("output feedback: mean norm {} -> {} at t = {closed_t}", fmt17(c0), fmt17(c1)),
    ];
    if let Some(e) = &closed.merged.observer_error_mean {
        let (e0, e1) = ends(e);
        lines.push(format!("observer error: mean norm {} -> {}", fmt17(e0), fmt17(e1)));
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_clip_and_dedupe() {
        assert_eq!(snapshot_schedule(&[0.2, 0.0, 0.18, 0.5], 0.2, 1e-4), vec![0.0, 0.18, 0.2]);
        assert_eq!(snapshot_schedule(&[0.1, 0.10001], 1.0, 1e-3), vec![0.1]);
        assert!(snapshot_schedule(&[0.1], 0.0, 1e-3).is_empty());
    }

    #[test]
    fn merged_csv_columns() {
        let m = MergedSeries {
            times: vec![0.0, 1.0],
            mean_norm: vec![2.0, 1.0],
            total_norm: vec![3.0, 1.5],
            observer_error_mean: None,
            observer_error_total: None,
        };
        let csv = merged_csv(&m);
        assert_eq!(csv.lines().next(), Some("time,mean_norm,total_norm"));
        assert_eq!(csv.lines().count(), 3);
    }
}
