//! Fixed-point drivers that assemble the slab marching, the wall exchange,
//! and the collision closure into complete problems.
//!
//! Everything here is built on one primitive: the period map, which marches a
//! state across one wall-temperature period. For the linear problems that map
//! is affine in the state, so time-periodic solutions are plain Picard fixed
//! points. The continuation pipeline follows the classical construction
//! order: first the boundary is damped by a factor `1 - 1/j` and the gain is
//! off, which makes the map a strong contraction; then the damping is relaxed
//! to full reflection, the gain is bootstrapped in through `lambda`, and the
//! penalty rate `eps` is walked down to zero, each stage warm-starting the
//! next. The zero-penalty endpoint is run directly rather than extrapolated;
//! it is well posed here because the mass moment is anchored to zero after
//! every iterate.
//!
//! The steady wall problem and the oscillating-wall problem share one exact
//! piece of discrete algebra. A wall at temperature `theta` feeds back
//! `sqrt(mu) phi + K_theta phi + K_theta` where `phi` is the calibrated flux
//! and `K_theta = (mu_hat_theta - mu)/sqrt(mu)` is the temperature correction
//! row. Splitting the solution into a steady part `f*` (wall at the mean
//! temperature) and an oscillatory remainder turns the remainder's boundary
//! data into `sqrt(mu) phi + K_theta(t) phi` plus the explicit source
//! `(mu_hat_theta(t) - mu_hat_mean)/sqrt(mu) * (1 + phi*)`, with `phi*` the
//! steady flux. Both pieces are still affine in the state, so each outer
//! iterate of the nonlinear solves is again a Picard-solvable problem; only
//! the quadratic term is lagged between outer iterates.
//!
//! The quadratic closure is the relaxation surrogate `nu (I - P)(f g)`
//! throughout: it costs a handful of dot products per row and its
//! sqrt(mu)-moment vanishes identically, which keeps the mass books clean.
//! The sampled bilinear collision form stays available for diagnostics but is
//! far too expensive to sit inside a fixed-point loop.
//!
//! Iterates carry their history in an [`IterationTrace`]: norms, difference
//! norms, anchored mass, wall-clock. The observed contraction ratio of a
//! trace is the geometric mean of consecutive difference quotients above the
//! rounding floor.

use std::time::Instant;

use crate::collision::{BgkSurrogate, CollisionOperator};
use crate::equilibria::{BoundaryCalibration, TemporalShape, WallModel};
use crate::error::Error;
use crate::transport::{
    BoundaryDrive, BoundarySource, NonlinearWall, NormSample, OscillationSource, SourceField,
    StepScratch, TransportConfig, TransportStepper,
};
use crate::vgrid::{boundary_norm, mass_moment, DistributionField, Half, Side, VelocityGrid};
use crate::{Result, Scalar};

/// Schedules and tolerances shared by every solver in this module.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Spatial and stepping base; `epsilon`, `lambda`, `j_damping`, and `dt`
    /// are overwritten per continuation stage.
    pub transport: TransportConfig,
    /// Wall temperature period `T`; wall models passed alongside must match.
    pub period: f64,
    /// Steps per period, so `dt = period / period_steps`.
    pub period_steps: usize,
    /// Decreasing penalty rates; the final entry must be exactly zero.
    pub epsilon_schedule: Vec<f64>,
    /// Increasing gain weights in `[0, 1]`; the final entry must be one.
    pub lambda_schedule: Vec<f64>,
    /// Increasing boundary damping indices; `None` is full reflection and may
    /// only appear last.
    pub j_schedule: Vec<Option<u32>>,
    /// Convergence threshold on the weighted sup of iterate differences.
    pub picard_tol: f64,
    /// Iteration budget per fixed-point loop.
    pub max_picard: usize,
    /// Slice-mass tolerance relative to the solution scale.
    pub mass_tol: f64,
    /// Anchored mass above this (relative) threshold aborts the run.
    pub anchor_fail: f64,
    /// Wall data amplitudes above this threshold only warn, not error.
    pub small_data_guard: f64,
    /// A-priori constant in the blow-up guard `10 * C * delta1`.
    pub amplitude_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            transport: TransportConfig::default(),
            period: 1.0,
            period_steps: 200,
            epsilon_schedule: vec![1e-1, 1e-2, 1e-3, 0.0],
            lambda_schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            j_schedule: vec![Some(4), Some(16), Some(64), None],
            picard_tol: 1e-8,
            max_picard: 200,
            mass_tol: 1e-8,
            anchor_fail: 1e-4,
            small_data_guard: 0.05,
            amplitude_factor: 25.0,
        }
    }
}

impl SolverConfig {
    /// Step size implied by the period discretization.
    pub fn dt(&self) -> f64 {
        self.period / self.period_steps as f64
    }

    /// Checks the schedules and tolerances.
    pub fn validate(&self) -> Result<()> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::config("period must be positive and finite"));
        }
        if self.period_steps < 2 {
            return Err(Error::config("period_steps must be at least 2"));
        }
        if self.epsilon_schedule.is_empty() {
            return Err(Error::config("epsilon schedule must not be empty"));
        }
        for w in self.epsilon_schedule.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::config(
                    "epsilon schedule must be strictly decreasing",
                ));
            }
        }
        for &e in &self.epsilon_schedule {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::config("epsilon entries must be finite and >= 0"));
            }
        }
        if self.epsilon_schedule.last() != Some(&0.0) {
            return Err(Error::config(
                "epsilon schedule must end at exactly zero; the endpoint is run directly",
            ));
        }
        if self.lambda_schedule.is_empty() {
            return Err(Error::config("lambda schedule must not be empty"));
        }
        for w in self.lambda_schedule.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::config(
                    "lambda schedule must be strictly increasing",
                ));
            }
        }
        for &l in &self.lambda_schedule {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("lambda entries must lie in [0, 1]"));
            }
        }
        if self.lambda_schedule.last() != Some(&1.0) {
            return Err(Error::config("lambda schedule must end at exactly one"));
        }
        if self.j_schedule.is_empty() {
            return Err(Error::config("damping schedule must not be empty"));
        }
        let key = |j: &Option<u32>| j.map_or(u64::MAX, u64::from);
        for w in self.j_schedule.windows(2) {
            if key(&w[1]) <= key(&w[0]) {
                return Err(Error::config(
                    "damping schedule must be strictly increasing with full reflection last",
                ));
            }
        }
        for j in self.j_schedule.iter().flatten() {
            if *j < 2 {
                return Err(Error::config("damping indices must be at least 2"));
            }
        }
        if !(self.picard_tol.is_finite() && self.picard_tol > 0.0) {
            return Err(Error::config("picard_tol must be positive"));
        }
        if self.max_picard < 2 {
            return Err(Error::config("max_picard must be at least 2"));
        }
        for (name, v) in [
            ("mass_tol", self.mass_tol),
            ("anchor_fail", self.anchor_fail),
            ("small_data_guard", self.small_data_guard),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.amplitude_factor.is_finite() && self.amplitude_factor >= 1.0) {
            return Err(Error::config("amplitude_factor must be at least 1"));
        }
        Ok(())
    }

    fn stage(&self, epsilon: f64, lambda: f64, j_damping: Option<u32>) -> TransportConfig {
        TransportConfig {
            epsilon,
            lambda,
            j_damping,
            dt: self.dt(),
            ..self.transport
        }
    }
}

/// Grid, calibration, collision operator, and norm weights one solve needs.
pub struct SolverModels<'a, S> {
    pub grid: &'a VelocityGrid<S>,
    pub cal: &'a BoundaryCalibration<S>,
    /// Linear collision operator driving loss and gain; the surrogate itself
    /// in fast mode, the assembled kernel in full mode.
    pub collision: &'a dyn CollisionOperator<S>,
    /// Relaxation surrogate supplying the quadratic closure.
    pub surrogate: &'a BgkSurrogate<S>,
    /// Velocity weight table for the sup norms.
    pub weights: &'a [S],
}

/// Per-iterate history of a fixed-point loop.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    /// Weighted sup norm of each iterate (trajectory sup for period maps).
    pub weighted_sup: Vec<f64>,
    /// Boundary norm sup of each iterate.
    pub boundary_sup: Vec<f64>,
    /// Weighted sup of the difference to the previous iterate, one entry per
    /// iterate past the first.
    pub diff: Vec<f64>,
    /// Wall-clock seconds spent producing each iterate.
    pub seconds: Vec<f64>,
    /// Mass moment removed by anchoring at each iterate.
    pub anchored_mass: Vec<f64>,
    /// Soft-guard messages produced during the solve.
    pub warnings: Vec<String>,
}

impl IterationTrace {
    /// Number of recorded iterates, counting the initial guess.
    pub fn iterations(&self) -> usize {
        self.weighted_sup.len()
    }

    /// Geometric mean of consecutive difference quotients above the rounding
    /// floor, the observed contraction ratio.
    pub fn observed_ratio(&self) -> Option<f64> {
        let floor = self.diff.iter().fold(0.0f64, |a, &b| a.max(b)) * 1e-12;
        let mut logs = Vec::new();
        for w in self.diff.windows(2) {
            if w[0] > floor && w[1] > floor {
                logs.push((w[1] / w[0]).ln());
            }
        }
        if logs.is_empty() {
            None
        } else {
            Some((logs.iter().sum::<f64>() / logs.len() as f64).exp())
        }
    }

    fn push(&mut self, weighted_sup: f64, boundary_sup: f64, seconds: f64, anchored: f64) {
        self.weighted_sup.push(weighted_sup);
        self.boundary_sup.push(boundary_sup);
        self.seconds.push(seconds);
        self.anchored_mass.push(anchored);
    }
}

/// A time-periodic solution over one period, `period_steps + 1` slices with
/// the first and last identified up to the recorded residual.
#[derive(Debug, Clone)]
pub struct PeriodicSolution<S> {
    /// The periodic field. For the oscillating-wall solve this is the
    /// oscillatory part around the steady state, the quantity the linear
    /// response estimate bounds; the linear solves store the solution itself.
    pub field: DistributionField<S>,
    /// Steady part the field oscillates around, when the solve had one.
    pub steady: Option<Vec<S>>,
    /// Weighted sup distance between the first and last slice.
    pub residual: f64,
    /// Weighted sup norm of the field over the period.
    pub weighted_sup: f64,
    /// Mass moment of every slice.
    pub slice_mass: Vec<f64>,
    /// Solution norm divided by the driving amplitude (source norms for the
    /// linear solves, the wall oscillation amplitude for the nonlinear one).
    pub c_estimate: Option<f64>,
    /// One c estimate per penalty stage of the continuation pipeline.
    pub c_history: Vec<f64>,
    /// Outer iteration history.
    pub trace: IterationTrace,
}

impl<S: Scalar> PeriodicSolution<S> {
    /// Steps per period stored in the field.
    pub fn n_steps(&self) -> usize {
        self.field.n_t - 1
    }

    /// Slice `k` plus the steady part, the full perturbation of the global
    /// Maxwellian.
    pub fn total_slice(&self, k: usize) -> Vec<S> {
        let mut out = self.field.slice_t(k).to_vec();
        if let Some(st) = &self.steady {
            for (o, s) in out.iter_mut().zip(st) {
                *o += *s;
            }
        }
        out
    }
}

/// Time-independent wall solution `F = mu + sqrt(mu) f` at fixed temperature.
#[derive(Debug, Clone)]
pub struct SteadySolution<S> {
    /// The steady perturbation `f`, one slab slice.
    pub state: Vec<S>,
    /// Calibrated outgoing flux of the steady trace per wall.
    pub flux: [S; 2],
    /// Weighted sup norm of the state.
    pub weighted_sup: f64,
    /// Mass moment of the state (anchored to zero).
    pub mass: f64,
    /// Weighted sup change under one more period-map application.
    pub residual: f64,
    /// Outer iteration history.
    pub trace: IterationTrace,
}

/// Norm trajectory and final state of an initial-value march.
#[derive(Debug, Clone)]
pub struct EvolveReport<S> {
    /// One sample per step, starting with the initial state.
    pub norms: Vec<NormSample>,
    /// The perturbation at the end of the horizon.
    pub final_state: Vec<S>,
    /// Periods marched.
    pub periods: usize,
    /// Gap between the march and three function-space sweeps, as a fraction
    /// of the first-period norm scale; only in verification mode.
    pub verification_gap: Option<f64>,
    /// Soft-guard messages produced during the march.
    pub warnings: Vec<String>,
}

/// Outcome of the geometric-decay bookkeeping check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LemmaOutcome {
    /// Hypothesis held on the whole prefix; `bound` is the certified window
    /// bound at the largest admissible index.
    Certified { bound: f64 },
    /// Hypothesis `a_{i+1+k} <= A_i/8 + d` first fails at this `i`.
    Violated { index: usize },
}

/// Time-independent boundary source with one fixed row per side.
struct FixedRows<S> {
    rows: [Vec<S>; 2],
}

impl<S: Scalar> BoundarySource<S> for FixedRows<S> {
    fn fill(&self, _t: f64, side: Side, out: &mut [S]) {
        out.copy_from_slice(&self.rows[side.index()]);
    }
}

fn wsup_state<S: Scalar>(state: &[S], weights: &[S]) -> f64 {
    let n_v = weights.len();
    let mut sup = S::zero();
    for row in state.chunks_exact(n_v) {
        for (f, w) in row.iter().zip(weights) {
            sup = sup.max((*f * *w).abs());
        }
    }
    sup.to_f64_lossy()
}

fn wdiff_state<S: Scalar>(a: &[S], b: &[S], weights: &[S]) -> f64 {
    let n_v = weights.len();
    let mut sup = S::zero();
    for (ra, rb) in a.chunks_exact(n_v).zip(b.chunks_exact(n_v)) {
        for ((fa, fb), w) in ra.iter().zip(rb).zip(weights) {
            sup = sup.max(((*fa - *fb) * *w).abs());
        }
    }
    sup.to_f64_lossy()
}

/// Mass moment of the tiled sqrt(mu) profile, the measure of `mu` itself.
fn mu_total_mass<S: Scalar>(grid: &VelocityGrid<S>, dx: f64, n_x: usize) -> f64 {
    let h3 = grid.cell_volume().to_f64_lossy();
    let mut s = 0.0;
    for i in 0..grid.len() {
        s += (-grid.speed_sq(i).to_f64_lossy() / 2.0).exp();
    }
    s / (2.0 * std::f64::consts::PI) * h3 * dx * n_x as f64
}

/// Projects the sqrt(mu) component out of `state`, returning the removed
/// moment.
fn anchor_mass<S: Scalar>(
    state: &mut [S],
    grid: &VelocityGrid<S>,
    dx: f64,
    smu: &[S],
    mu_mass: f64,
) -> f64 {
    let m = mass_moment(state, grid, dx, smu).to_f64_lossy();
    let c = S::c(m / mu_mass);
    for row in state.chunks_exact_mut(smu.len()) {
        for (f, s) in row.iter_mut().zip(smu) {
            *f -= c * *s;
        }
    }
    m
}

fn sample_state<S: Scalar>(
    state: &[S],
    t: f64,
    grid: &VelocityGrid<S>,
    dx: f64,
    smu: &[S],
    weights: &[S],
) -> NormSample {
    let n_v = grid.len();
    let mut sup = S::zero();
    let mut sumsq = S::zero();
    for row in state.chunks_exact(n_v) {
        for (f, w) in row.iter().zip(weights) {
            sup = sup.max((*f * *w).abs());
            sumsq += *f * *f;
        }
    }
    let l2 = (sumsq * grid.cell_volume() * S::c(dx)).sqrt().to_f64_lossy();
    let bl = boundary_norm(&state[..n_v], grid, Side::Left, Half::Outgoing).to_f64_lossy();
    let br = boundary_norm(&state[state.len() - n_v..], grid, Side::Right, Half::Outgoing)
        .to_f64_lossy();
    NormSample {
        t,
        weighted_sup: sup.to_f64_lossy(),
        l2,
        boundary: (bl * bl + br * br).sqrt(),
        mass: mass_moment(state, grid, dx, smu).to_f64_lossy(),
    }
}

/// Writes the relaxation closure `nu (I - P)(f (f + 2 p))` row by row, where
/// `p` is the sum of the given background parts.
fn quadratic_source<S: Scalar>(
    surrogate: &BgkSurrogate<S>,
    n_v: usize,
    f: &[S],
    p1: Option<&[S]>,
    p2: Option<&[S]>,
    out: &mut [S],
) {
    let mut h = vec![S::zero(); n_v];
    let two = S::c(2.0);
    for (x, (f_row, o_row)) in f
        .chunks_exact(n_v)
        .zip(out.chunks_exact_mut(n_v))
        .enumerate()
    {
        for v in 0..n_v {
            let mut pv = S::zero();
            if let Some(p) = p1 {
                pv += p[x * n_v + v];
            }
            if let Some(p) = p2 {
                pv += p[x * n_v + v];
            }
            h[v] = f_row[v] + two * pv;
        }
        surrogate.gamma(f_row, &h, o_row);
    }
}

/// Largest weighted sup norm the sources reach over one period.
fn source_norm<S: Scalar>(
    models: &SolverModels<'_, S>,
    config: &SolverConfig,
    g: SourceField<'_, S>,
    r: Option<&dyn BoundarySource<S>>,
) -> f64 {
    let mut total = match g {
        SourceField::None => 0.0,
        SourceField::Steady(s) => wsup_state(s, models.weights),
        SourceField::Periodic(f) => (0..config.period_steps.min(f.n_t))
            .map(|k| wsup_state(f.slice_t(k), models.weights))
            .fold(0.0, f64::max),
    };
    if let Some(r) = r {
        let n_v = models.grid.len();
        let mut row = vec![S::zero(); n_v];
        let mut rsup = 0.0f64;
        for k in 0..config.period_steps {
            let t = k as f64 * config.dt();
            for side in Side::BOTH {
                row.fill(S::zero());
                r.fill(t, side, &mut row);
                rsup = rsup.max(wsup_state(&row, models.weights));
            }
        }
        total += rsup;
    }
    total
}

/// One continuation stage: a stepper plus the data its period map consumes.
struct StageProblem<'a, S: Scalar> {
    stepper: &'a TransportStepper<S>,
    collision: Option<&'a dyn CollisionOperator<S>>,
    g: SourceField<'a, S>,
    drive: &'a BoundaryDrive<'a, S>,
    anchor: bool,
    what: String,
}

/// Runs period-map Picard from `start` until the iterate difference drops
/// below `picard_tol`, appending every iterate to `trace`.
fn run_picard<S: Scalar>(
    prob: &StageProblem<'_, S>,
    models: &SolverModels<'_, S>,
    config: &SolverConfig,
    start: &mut Vec<S>,
    trace: &mut IterationTrace,
    scratch: &mut StepScratch<S>,
) -> Result<()> {
    let dx = prob.stepper.cfg().dx();
    let n_x = prob.stepper.cfg().n_space;
    let mu_mass = mu_total_mass(models.grid, dx, n_x);
    let smu = prob.stepper.sqrt_mu().to_vec();
    let mut prev = vec![S::zero(); start.len()];
    for it in 0..config.max_picard {
        let clock = Instant::now();
        prev.copy_from_slice(start);
        let diag = prob.stepper.advance_period(
            start,
            0.0,
            config.period_steps,
            prob.collision,
            prob.g,
            prob.drive,
            models.grid,
            models.cal,
            models.weights,
            None,
            scratch,
        )?;
        if it == 0 {
            trace.push(diag.norms[0].weighted_sup, diag.norms[0].boundary, 0.0, 0.0);
        }
        let anchored = if prob.anchor {
            anchor_mass(start, models.grid, dx, &smu, mu_mass)
        } else {
            0.0
        };
        let wsup = diag
            .norms
            .iter()
            .map(|s| s.weighted_sup)
            .fold(0.0, f64::max);
        if prob.anchor && anchored.abs() > config.anchor_fail * (1.0 + wsup) {
            return Err(Error::MassDrift {
                context: format!("{}: anchored mass points at a flux defect", prob.what),
                drift: anchored,
                tol: config.anchor_fail * (1.0 + wsup),
            });
        }
        let bsup = diag.norms.iter().map(|s| s.boundary).fold(0.0, f64::max);
        let d = wdiff_state(start, &prev, models.weights);
        trace.push(wsup, bsup, clock.elapsed().as_secs_f64(), anchored);
        trace.diff.push(d);
        if d <= config.picard_tol {
            return Ok(());
        }
    }
    let tail: Vec<f64> = trace.diff.iter().rev().take(4).rev().copied().collect();
    Err(Error::Convergence {
        what: format!("{}: period map Picard stalled, last diffs {:?}", prob.what, tail),
        iterations: config.max_picard,
        residual: trace.diff.last().copied().unwrap_or(f64::NAN),
        tol: config.picard_tol,
    })
}

struct Finalized<S> {
    field: DistributionField<S>,
    residual: f64,
    weighted_sup: f64,
    slice_mass: Vec<f64>,
}

/// Records one period from the converged start, measuring the periodicity
/// residual and checking the slice masses.
fn finalize_periodic<S: Scalar>(
    prob: &StageProblem<'_, S>,
    models: &SolverModels<'_, S>,
    config: &SolverConfig,
    start: &[S],
    scratch: &mut StepScratch<S>,
) -> Result<Finalized<S>> {
    let n_v = models.grid.len();
    let n_x = prob.stepper.cfg().n_space;
    let mut field = DistributionField::zeros(config.period_steps + 1, n_x, n_v);
    let mut end = start.to_vec();
    let diag = prob.stepper.advance_period(
        &mut end,
        0.0,
        config.period_steps,
        prob.collision,
        prob.g,
        prob.drive,
        models.grid,
        models.cal,
        models.weights,
        Some(&mut field),
        scratch,
    )?;
    let residual = wdiff_state(&end, start, models.weights);
    let weighted_sup = diag
        .norms
        .iter()
        .map(|s| s.weighted_sup)
        .fold(0.0, f64::max);
    let slice_mass: Vec<f64> = diag.norms.iter().map(|s| s.mass).collect();
    // Damped and penalized stages absorb mass by construction; only the
    // mass-conserving problems owe vanishing slice masses.
    if prob.anchor {
        let mu_mass = mu_total_mass(models.grid, prob.stepper.cfg().dx(), n_x);
        let worst = slice_mass.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
        let bound = config.mass_tol * mu_mass * weighted_sup.max(config.picard_tol);
        if worst > bound {
            return Err(Error::MassDrift {
                context: format!("{}: slice mass of the returned solution", prob.what),
                drift: worst,
                tol: bound,
            });
        }
    }
    Ok(Finalized {
        field,
        residual,
        weighted_sup,
        slice_mass,
    })
}

/// Solves the damped linear periodic problem: gain off, boundary reflection
/// scaled by `1 - 1/j`, penalty rate `epsilon` added to the loss.
///
/// The boundary damping makes the period map a strong contraction, so plain
/// Picard from zero converges geometrically; the observed ratio lands well
/// under one and is recorded in the trace.
pub fn solve_damped_linear<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    g: SourceField<'_, S>,
    r: Option<&dyn BoundarySource<S>>,
    j: u32,
    epsilon: f64,
) -> Result<PeriodicSolution<S>> {
    config.validate()?;
    if j < 2 {
        return Err(Error::config("boundary damping index must be at least 2"));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::config(
            "the damped stage needs a strictly positive penalty rate",
        ));
    }
    let stepper = TransportStepper::new(
        config.stage(epsilon, 0.0, Some(j)),
        models.grid,
        Some(models.collision.nu()),
        config.period,
    )?;
    let drive = BoundaryDrive {
        source: r,
        nonlinear: None,
    };
    let prob = StageProblem {
        stepper: &stepper,
        collision: None,
        g,
        drive: &drive,
        anchor: false,
        what: format!("damped linear stage (j={j}, eps={epsilon:.3e})"),
    };
    let mut scratch = stepper.scratch();
    let mut start = vec![S::zero(); stepper.state_len()];
    let mut trace = IterationTrace::default();
    run_picard(&prob, models, config, &mut start, &mut trace, &mut scratch)?;
    let fin = finalize_periodic(&prob, models, config, &start, &mut scratch)?;
    let src = source_norm(models, config, g, r);
    Ok(PeriodicSolution {
        field: fin.field,
        steady: None,
        residual: fin.residual,
        weighted_sup: fin.weighted_sup,
        slice_mass: fin.slice_mass,
        c_estimate: (src > 0.0).then(|| fin.weighted_sup / src),
        c_history: Vec::new(),
        trace,
    })
}

/// Solves the full linear periodic problem directly at full reflection, unit
/// gain, and zero penalty, the practical default path.
pub fn solve_linear_periodic_direct<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    g: SourceField<'_, S>,
    r: Option<&dyn BoundarySource<S>>,
) -> Result<PeriodicSolution<S>> {
    config.validate()?;
    let stepper = TransportStepper::new(
        config.stage(0.0, 1.0, None),
        models.grid,
        Some(models.collision.nu()),
        config.period,
    )?;
    let drive = BoundaryDrive {
        source: r,
        nonlinear: None,
    };
    let prob = StageProblem {
        stepper: &stepper,
        collision: Some(models.collision),
        g,
        drive: &drive,
        anchor: true,
        what: "direct linear periodic solve".into(),
    };
    let mut scratch = stepper.scratch();
    let mut start = vec![S::zero(); stepper.state_len()];
    let mut trace = IterationTrace::default();
    run_picard(&prob, models, config, &mut start, &mut trace, &mut scratch)?;
    let fin = finalize_periodic(&prob, models, config, &start, &mut scratch)?;
    let src = source_norm(models, config, g, r);
    Ok(PeriodicSolution {
        field: fin.field,
        steady: None,
        residual: fin.residual,
        weighted_sup: fin.weighted_sup,
        slice_mass: fin.slice_mass,
        c_estimate: (src > 0.0).then(|| fin.weighted_sup / src),
        c_history: Vec::new(),
        trace,
    })
}

/// Solves the full linear periodic problem through the continuation pipeline:
/// damping relaxed first, then the gain bootstrapped in, then the penalty
/// walked down to zero, every stage warm-starting the next.
///
/// The stability constant (solution norm over source norm) is recorded per
/// penalty stage in `c_history`; its flatness near the endpoint is the
/// discrete shadow of the penalty-independent a-priori bound.
pub fn solve_linear_periodic<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    g: SourceField<'_, S>,
    r: Option<&dyn BoundarySource<S>>,
) -> Result<PeriodicSolution<S>> {
    config.validate()?;
    let eps0 = config.epsilon_schedule[0];
    let lam0 = config.lambda_schedule[0];
    let nu = models.collision.nu();
    let src = source_norm(models, config, g, r);
    let drive = BoundaryDrive {
        source: r,
        nonlinear: None,
    };
    let mut start: Vec<S> = Vec::new();
    let mut scratch = None;
    let mut trace = IterationTrace::default();
    let mut c_history = Vec::new();
    let run_stage = |start: &mut Vec<S>,
                         scratch: &mut Option<StepScratch<S>>,
                         trace: &mut IterationTrace,
                         eps: f64,
                         lam: f64,
                         j: Option<u32>,
                         what: String|
     -> Result<()> {
        let stepper =
            TransportStepper::new(config.stage(eps, lam, j), models.grid, Some(nu), config.period)?;
        if start.is_empty() {
            *start = vec![S::zero(); stepper.state_len()];
        }
        let scratch = scratch.get_or_insert_with(|| stepper.scratch());
        let prob = StageProblem {
            stepper: &stepper,
            collision: Some(models.collision),
            g,
            drive: &drive,
            anchor: true,
            what,
        };
        run_picard(&prob, models, config, start, trace, scratch)
    };
    for &j in &config.j_schedule {
        let label = j.map_or("inf".into(), |j| j.to_string());
        run_stage(
            &mut start,
            &mut scratch,
            &mut trace,
            eps0,
            lam0,
            j,
            format!("damping stage j={label}"),
        )?;
    }
    for &lam in &config.lambda_schedule {
        if lam == lam0 {
            continue;
        }
        run_stage(
            &mut start,
            &mut scratch,
            &mut trace,
            eps0,
            lam,
            None,
            format!("gain stage lambda={lam}"),
        )?;
    }
    for (i, &eps) in config.epsilon_schedule.iter().enumerate() {
        if i > 0 {
            run_stage(
                &mut start,
                &mut scratch,
                &mut trace,
                eps,
                1.0,
                None,
                format!("penalty stage eps={eps:.3e}"),
            )?;
        }
        let wsup = trace.weighted_sup.last().copied().unwrap_or(0.0);
        c_history.push(if src > 0.0 { wsup / src } else { 0.0 });
    }
    let stepper = TransportStepper::new(
        config.stage(0.0, 1.0, None),
        models.grid,
        Some(nu),
        config.period,
    )?;
    let prob = StageProblem {
        stepper: &stepper,
        collision: Some(models.collision),
        g,
        drive: &drive,
        anchor: true,
        what: "continuation endpoint".into(),
    };
    let mut scratch = scratch.unwrap_or_else(|| stepper.scratch());
    let fin = finalize_periodic(&prob, models, config, &start, &mut scratch)?;
    Ok(PeriodicSolution {
        field: fin.field,
        steady: None,
        residual: fin.residual,
        weighted_sup: fin.weighted_sup,
        slice_mass: fin.slice_mass,
        c_estimate: (src > 0.0).then(|| fin.weighted_sup / src),
        c_history,
        trace,
    })
}

/// Solves the steady wall problem at fixed temperatures `theta_bar`.
///
/// Outer iterates lag the quadratic closure; each inner problem is affine
/// (the temperature correction row couples linearly through the flux) and is
/// solved by period-map Picard at full reflection and zero penalty. The
/// sqrt(mu)-moment is anchored to zero after every iterate, matching the
/// equal-total-mass normalization.
pub fn solve_steady<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    theta_bar: [f64; 2],
) -> Result<SteadySolution<S>> {
    config.validate()?;
    let delta2 = (theta_bar[0] - 1.0).abs().max((theta_bar[1] - 1.0).abs());
    let mut trace = IterationTrace::default();
    if delta2 > 0.1 {
        trace.warnings.push(format!(
            "wall temperature deviates by {delta2:.3}; the small-data regime is stretched"
        ));
    }
    let wall = WallModel::new(config.period, theta_bar, 0.0, TemporalShape::Sine)?;
    let n_v = models.grid.len();
    let rows = FixedRows {
        rows: [
            models
                .cal
                .correction_kernel(models.grid, Side::Left, theta_bar[0]),
            models
                .cal
                .correction_kernel(models.grid, Side::Right, theta_bar[1]),
        ],
    };
    let drive = BoundaryDrive {
        source: Some(&rows),
        nonlinear: Some(NonlinearWall {
            grid: models.grid,
            cal: models.cal,
            wall: &wall,
        }),
    };
    let stepper = TransportStepper::new(
        config.stage(0.0, 1.0, None),
        models.grid,
        Some(models.collision.nu()),
        config.period,
    )?;
    let mut scratch = stepper.scratch();
    let mut start = vec![S::zero(); stepper.state_len()];
    let mut g_slab = vec![S::zero(); stepper.state_len()];
    let mut prev = vec![S::zero(); stepper.state_len()];
    let mut converged = false;
    for _ in 0..config.max_picard {
        let clock = Instant::now();
        quadratic_source(models.surrogate, n_v, &start, None, None, &mut g_slab);
        prev.copy_from_slice(&start);
        let mut inner = IterationTrace::default();
        let prob = StageProblem {
            stepper: &stepper,
            collision: Some(models.collision),
            g: SourceField::Steady(&g_slab),
            drive: &drive,
            anchor: true,
            what: format!("steady wall problem at theta=({}, {})", theta_bar[0], theta_bar[1]),
        };
        run_picard(&prob, models, config, &mut start, &mut inner, &mut scratch)?;
        let anchored = inner
            .anchored_mass
            .iter()
            .fold(0.0f64, |a, &m| a.max(m.abs()));
        let d = wdiff_state(&start, &prev, models.weights);
        let bsup = inner.boundary_sup.last().copied().unwrap_or(0.0);
        trace.push(
            wsup_state(&start, models.weights),
            bsup,
            clock.elapsed().as_secs_f64(),
            anchored,
        );
        trace.diff.push(d);
        if d <= config.picard_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let tail: Vec<f64> = trace.diff.iter().rev().take(4).rev().copied().collect();
        return Err(Error::Convergence {
            what: format!("steady outer iteration stalled, last diffs {tail:?}"),
            iterations: config.max_picard,
            residual: trace.diff.last().copied().unwrap_or(f64::NAN),
            tol: config.picard_tol,
        });
    }
    // One more period map application measures the steady residual.
    quadratic_source(models.surrogate, n_v, &start, None, None, &mut g_slab);
    let mut end = start.clone();
    let prob = StageProblem {
        stepper: &stepper,
        collision: Some(models.collision),
        g: SourceField::Steady(&g_slab),
        drive: &drive,
        anchor: false,
        what: "steady residual check".into(),
    };
    prob.stepper.advance_period(
        &mut end,
        0.0,
        config.period_steps,
        prob.collision,
        prob.g,
        prob.drive,
        models.grid,
        models.cal,
        models.weights,
        None,
        &mut scratch,
    )?;
    let residual = wdiff_state(&end, &start, models.weights);
    let smu = stepper.sqrt_mu();
    let dx = stepper.cfg().dx();
    let mass = mass_moment(&start, models.grid, dx, smu).to_f64_lossy();
    let mu_mass = mu_total_mass(models.grid, dx, stepper.cfg().n_space);
    if mass.abs() > config.mass_tol * mu_mass {
        return Err(Error::MassDrift {
            context: "steady solution mass normalization".into(),
            drift: mass,
            tol: config.mass_tol * mu_mass,
        });
    }
    let mut flux = [S::zero(); 2];
    let mut masked = vec![S::zero(); n_v];
    for side in Side::BOTH {
        let row = match side {
            Side::Left => &start[..n_v],
            Side::Right => &start[start.len() - n_v..],
        };
        masked.fill(S::zero());
        for &i in models.grid.outgoing(side) {
            masked[i as usize] = row[i as usize];
        }
        flux[side.index()] = models.cal.outgoing_flux(models.grid, smu, side, &masked);
    }
    Ok(SteadySolution {
        weighted_sup: wsup_state(&start, models.weights),
        state: start,
        flux,
        mass,
        residual,
        trace,
    })
}

/// Solves the oscillating-wall problem around the steady state.
///
/// The returned field is the oscillatory part; the steady part rides along in
/// `steady` and `total_slice` reassembles the full perturbation. Outer
/// iterates lag the quadratic closure on the previous period trajectory; the
/// wall oscillation enters through the explicit source scaled by `1 + phi*`
/// and the temperature correction coupling at `theta(t)`.
pub fn solve_periodic_nonlinear<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    wall: &WallModel<S>,
    steady: &SteadySolution<S>,
) -> Result<PeriodicSolution<S>> {
    config.validate()?;
    if (wall.period() - config.period).abs() > 1e-9 * config.period {
        return Err(Error::config(format!(
            "wall period {} does not match the configured period {}",
            wall.period(),
            config.period
        )));
    }
    let delta1 = wall.delta1();
    let delta2 = (wall.theta_bar(Side::Left) - 1.0)
        .abs()
        .max((wall.theta_bar(Side::Right) - 1.0).abs());
    let mut trace = IterationTrace::default();
    if delta1 > config.small_data_guard || delta2 > config.small_data_guard {
        trace.warnings.push(format!(
            "wall data (delta1={delta1:.3}, delta2={delta2:.3}) exceeds the small-data guard {}",
            config.small_data_guard
        ));
    }
    let stepper = TransportStepper::new(
        config.stage(0.0, 1.0, None),
        models.grid,
        Some(models.collision.nu()),
        config.period,
    )?;
    if steady.state.len() != stepper.state_len() {
        return Err(Error::Dimension {
            context: "steady state for the oscillatory solve",
            expected: stepper.state_len(),
            got: steady.state.len(),
        });
    }
    let one = S::one();
    let osc = OscillationSource {
        grid: models.grid,
        cal: models.cal,
        wall,
        flux_multiplier: [one + steady.flux[0], one + steady.flux[1]],
    };
    let drive = BoundaryDrive {
        source: Some(&osc),
        nonlinear: Some(NonlinearWall {
            grid: models.grid,
            cal: models.cal,
            wall,
        }),
    };
    let n_v = models.grid.len();
    let n_x = stepper.cfg().n_space;
    let steps = config.period_steps;
    let mut scratch = stepper.scratch();
    let mut traj = DistributionField::zeros(steps + 1, n_x, n_v);
    let mut gfield = DistributionField::zeros(steps, n_x, n_v);
    let mut start = vec![S::zero(); stepper.state_len()];
    let mut prev = vec![S::zero(); stepper.state_len()];
    let guard = 10.0 * config.amplitude_factor * delta1;
    let mut result = None;
    for _ in 0..config.max_picard {
        let clock = Instant::now();
        for k in 0..steps {
            let f_k = traj.slice_t(k).to_vec();
            quadratic_source(
                models.surrogate,
                n_v,
                &f_k,
                Some(&steady.state),
                None,
                gfield.slice_t_mut(k),
            );
        }
        prev.copy_from_slice(&start);
        let mut inner = IterationTrace::default();
        let prob = StageProblem {
            stepper: &stepper,
            collision: Some(models.collision),
            g: SourceField::Periodic(&gfield),
            drive: &drive,
            anchor: true,
            what: format!("oscillatory solve (delta1={delta1:.3e})"),
        };
        run_picard(&prob, models, config, &mut start, &mut inner, &mut scratch)?;
        // Record the new trajectory; this march also measures the residual.
        let mut end = start.clone();
        let diag = stepper.advance_period(
            &mut end,
            0.0,
            steps,
            Some(models.collision),
            SourceField::Periodic(&gfield),
            &drive,
            models.grid,
            models.cal,
            models.weights,
            Some(&mut traj),
            &mut scratch,
        )?;
        let wsup = diag
            .norms
            .iter()
            .map(|s| s.weighted_sup)
            .fold(0.0, f64::max);
        if delta1 > 0.0 && wsup > guard {
            return Err(Error::Blowup {
                what: "oscillatory iterate left the linear-response regime".into(),
                norm: wsup,
                bound: guard,
            });
        }
        let anchored = inner
            .anchored_mass
            .iter()
            .fold(0.0f64, |a, &m| a.max(m.abs()));
        let bsup = diag.norms.iter().map(|s| s.boundary).fold(0.0, f64::max);
        let d = wdiff_state(&start, &prev, models.weights);
        trace.push(wsup, bsup, clock.elapsed().as_secs_f64(), anchored);
        trace.diff.push(d);
        if d <= config.picard_tol {
            let residual = wdiff_state(&end, &start, models.weights);
            let slice_mass: Vec<f64> = diag.norms.iter().map(|s| s.mass).collect();
            result = Some((residual, wsup, slice_mass));
            break;
        }
    }
    let Some((residual, weighted_sup, slice_mass)) = result else {
        let tail: Vec<f64> = trace.diff.iter().rev().take(4).rev().copied().collect();
        return Err(Error::Convergence {
            what: format!("oscillatory outer iteration stalled, last diffs {tail:?}"),
            iterations: config.max_picard,
            residual: trace.diff.last().copied().unwrap_or(f64::NAN),
            tol: config.picard_tol,
        });
    };
    let mu_mass = mu_total_mass(models.grid, stepper.cfg().dx(), n_x);
    let worst = slice_mass.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
    let bound = config.mass_tol * mu_mass * weighted_sup.max(config.picard_tol);
    if worst > bound {
        return Err(Error::MassDrift {
            context: "oscillatory solution slice mass".into(),
            drift: worst,
            tol: bound,
        });
    }
    Ok(PeriodicSolution {
        field: traj,
        steady: Some(steady.state.clone()),
        residual,
        weighted_sup,
        slice_mass,
        c_estimate: (delta1 > 0.0).then(|| weighted_sup / delta1),
        c_history: Vec::new(),
        trace,
    })
}

/// Marches the perturbation around a periodic background from `f0` over the
/// given number of periods, sampling norms at every step.
///
/// The boundary condition is homogeneous (the explicit oscillation source
/// cancels between the solution and the background), the quadratic closure is
/// evaluated on the current state against the background slice of the moment,
/// and the sqrt(mu)-moment of `f0` is projected off before the march. With
/// `verify` set, three lagged function-space sweeps over the first period are
/// compared against the march.
pub fn evolve_ivp<S: Scalar>(
    config: &SolverConfig,
    models: &SolverModels<'_, S>,
    wall: &WallModel<S>,
    background: &PeriodicSolution<S>,
    f0: &[S],
    periods: usize,
    verify: bool,
) -> Result<EvolveReport<S>> {
    config.validate()?;
    if periods == 0 {
        return Err(Error::config("the march needs at least one period"));
    }
    if (wall.period() - config.period).abs() > 1e-9 * config.period {
        return Err(Error::config(format!(
            "wall period {} does not match the configured period {}",
            wall.period(),
            config.period
        )));
    }
    if background.n_steps() != config.period_steps {
        return Err(Error::config(format!(
            "background holds {} steps per period, config wants {}",
            background.n_steps(),
            config.period_steps
        )));
    }
    let Some(fstar) = &background.steady else {
        return Err(Error::config(
            "the background must carry its steady part; solve the oscillatory problem first",
        ));
    };
    let steps = config.period_steps;
    let horizon = periods as f64 * config.period;
    let stepper = TransportStepper::new(
        config.stage(0.0, 1.0, None),
        models.grid,
        Some(models.collision.nu()),
        horizon,
    )?;
    let n = stepper.state_len();
    if f0.len() != n {
        return Err(Error::Dimension {
            context: "initial perturbation",
            expected: n,
            got: f0.len(),
        });
    }
    let n_v = models.grid.len();
    let dx = stepper.cfg().dx();
    let dt = config.dt();
    let smu = stepper.sqrt_mu().to_vec();
    let mu_mass = mu_total_mass(models.grid, dx, stepper.cfg().n_space);
    let mut warnings = Vec::new();
    let mut state = f0.to_vec();
    let removed = anchor_mass(&mut state, models.grid, dx, &smu, mu_mass);
    let amp0 = wsup_state(&state, models.weights);
    if removed.abs() > config.mass_tol * (1.0 + amp0) {
        warnings.push(format!(
            "initial data carried mass {removed:.3e}; it was projected off"
        ));
    }
    if amp0 > config.small_data_guard {
        warnings.push(format!(
            "initial amplitude {amp0:.3e} exceeds the small-data guard {}",
            config.small_data_guard
        ));
    }
    let drive = BoundaryDrive {
        source: None,
        nonlinear: Some(NonlinearWall {
            grid: models.grid,
            cal: models.cal,
            wall,
        }),
    };
    let blow_bound = 1e3 * (amp0 + 1e-12);
    let total = periods * steps;
    let mut norms = Vec::with_capacity(total + 1);
    let mut scratch = stepper.scratch();
    let mut g_slab = vec![S::zero(); n];
    let mut p_slab = vec![S::zero(); n];
    let mut mass0 = 0.0;
    for k in 0..=total {
        let t = k as f64 * dt;
        let sample = sample_state(&state, t, models.grid, dx, &smu, models.weights);
        if k == 0 {
            mass0 = sample.mass;
        }
        if !sample.weighted_sup.is_finite() || sample.weighted_sup > blow_bound {
            return Err(Error::Blowup {
                what: format!("marched perturbation at t={t:.6}"),
                norm: sample.weighted_sup,
                bound: blow_bound,
            });
        }
        if k % steps == 0 && k > 0 {
            let drift = (sample.mass - mass0).abs();
            let tol = config.mass_tol * (k / steps) as f64 * amp0.max(config.picard_tol);
            if drift > tol {
                return Err(Error::MassDrift {
                    context: format!("march mass after {} periods", k / steps),
                    drift,
                    tol,
                });
            }
        }
        norms.push(sample);
        if k == total {
            break;
        }
        let slice = background.field.slice_t(k % steps);
        for (p, (s, f)) in p_slab.iter_mut().zip(slice.iter().zip(fstar.iter())) {
            *p = *s + *f;
        }
        quadratic_source(models.surrogate, n_v, &state, Some(&p_slab), None, &mut g_slab);
        stepper.step_in_place(
            &mut state,
            t,
            Some(models.collision),
            Some(&g_slab),
            &drive,
            &mut scratch,
        )?;
    }
    let verification_gap = if verify {
        let mut traj = DistributionField::zeros(steps + 1, stepper.cfg().n_space, n_v);
        let mut gfield = DistributionField::zeros(steps, stepper.cfg().n_space, n_v);
        let mut sweep_end = 0.0;
        for _ in 0..3 {
            for k in 0..steps {
                let f_k = traj.slice_t(k).to_vec();
                let bg = background.field.slice_t(k % steps);
                for (p, (s, f)) in p_slab.iter_mut().zip(bg.iter().zip(fstar.iter())) {
                    *p = *s + *f;
                }
                quadratic_source(
                    models.surrogate,
                    n_v,
                    &f_k,
                    Some(&p_slab),
                    None,
                    gfield.slice_t_mut(k),
                );
            }
            let mut s2 = f0.to_vec();
            anchor_mass(&mut s2, models.grid, dx, &smu, mu_mass);
            let diag = stepper.advance_period(
                &mut s2,
                0.0,
                steps,
                Some(models.collision),
                SourceField::Periodic(&gfield),
                &drive,
                models.grid,
                models.cal,
                models.weights,
                Some(&mut traj),
                &mut scratch,
            )?;
            sweep_end = diag.norms[steps].weighted_sup;
        }
        let direct_end = norms[steps].weighted_sup;
        let scale = norms[..=steps]
            .iter()
            .map(|s| s.weighted_sup)
            .fold(0.0, f64::max);
        Some(if scale > 0.0 {
            (sweep_end - direct_end).abs() / scale
        } else {
            0.0
        })
    } else {
        None
    };
    Ok(EvolveReport {
        norms,
        final_state: state,
        periods,
        verification_gap,
        warnings,
    })
}

/// Checks the geometric-decay bookkeeping on a nonnegative sequence.
///
/// With `A_i` the running window maximum `max(a_i..a_{i+k})`, the hypothesis
/// `a_{i+1+k} <= A_i/8 + d` is verified exactly on the whole prefix; where it
/// holds, the window bound
/// `A_i <= (1/8)^{floor(i/(k+1))} max(A_0..A_k) + (8+k)/7 d`
/// is asserted at every admissible index and the value at the largest one is
/// returned. A hypothesis failure reports its index instead of erroring.
pub fn iteration_lemma_check(sequence: &[f64], k: usize, d: f64) -> Result<LemmaOutcome> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::config("the additive constant must be finite and >= 0"));
    }
    for (i, &a) in sequence.iter().enumerate() {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config(format!(
                "sequence entry {i} must be finite and >= 0, got {a}"
            )));
        }
    }
    let n = sequence.len();
    if n < 2 * k + 2 {
        return Err(Error::config(format!(
            "history depth {k} needs at least {} entries, got {n}",
            2 * k + 2
        )));
    }
    let n_a = n - k;
    let mut window = vec![0.0f64; n_a];
    for (i, w) in window.iter_mut().enumerate() {
        *w = sequence[i..=i + k].iter().fold(0.0, |a, &b| a.max(b));
    }
    for i in 0..=(n - 2 - k) {
        if sequence[i + 1 + k] > window[i] / 8.0 + d {
            return Ok(LemmaOutcome::Violated { index: i });
        }
    }
    let head = window[..=k].iter().fold(0.0f64, |a, &b| a.max(b));
    let slack = 1e-9 * (head + d + 1.0);
    let mut certified = f64::INFINITY;
    for (i, &w) in window.iter().enumerate().skip(k + 1) {
        let bound = 0.125f64.powi((i / (k + 1)) as i32) * head + (8.0 + k as f64) / 7.0 * d;
        if w > bound + slack {
            return Err(Error::config(format!(
                "window maximum {w:.6e} at index {i} exceeds its certified bound {bound:.6e} \
                 despite the verified hypothesis; this points at rounding pathology"
            )));
        }
        certified = bound;
    }
    Ok(LemmaOutcome::Certified { bound: certified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::BgkSurrogate;
    use crate::equilibria::sqrt_mu_table;
    use crate::vgrid::WeightSpec;

    type G = VelocityGrid<f64>;

    struct Fix {
        grid: G,
        cal: BoundaryCalibration<f64>,
        surrogate: BgkSurrogate<f64>,
        weights: Vec<f64>,
        config: SolverConfig,
    }

    fn fix(n_axis: usize, n_space: usize, steps: usize, period: f64) -> Fix {
        let grid = G::new(2.6, n_axis).unwrap();
        let nu: Vec<f64> = (0..grid.len())
            .map(|i| 1.0 + 0.5 * grid.speed_sq(i).sqrt())
            .collect();
        let surrogate = BgkSurrogate::new(&grid, nu).unwrap();
        let cal = BoundaryCalibration::new(&grid);
        let weights = WeightSpec::default_for(1.0).table(&grid);
        let config = SolverConfig {
            transport: TransportConfig {
                n_space,
                ..TransportConfig::default()
            },
            period,
            period_steps: steps,
            epsilon_schedule: vec![5e-2, 1e-3, 0.0],
            lambda_schedule: vec![0.0, 0.5, 1.0],
            j_schedule: vec![Some(4), None],
            picard_tol: 1e-10,
            ..SolverConfig::default()
        };
        Fix {
            grid,
            cal,
            surrogate,
            weights,
            config,
        }
    }

    fn models(f: &Fix) -> SolverModels<'_, f64> {
        SolverModels {
            grid: &f.grid,
            cal: &f.cal,
            collision: &f.surrogate,
            surrogate: &f.surrogate,
            weights: &f.weights,
        }
    }

    #[test]
    fn config_validation_rejects_broken_schedules() {
        let ok = SolverConfig::default();
        assert!(ok.validate().is_ok(), "defaults must validate");
        let cases: Vec<(&str, SolverConfig)> = vec![
            ("empty eps", SolverConfig {
                epsilon_schedule: vec![],
                ..ok.clone()
            }),
            ("rising eps", SolverConfig {
                epsilon_schedule: vec![1e-3, 1e-2, 0.0],
                ..ok.clone()
            }),
            ("eps endpoint", SolverConfig {
                epsilon_schedule: vec![1e-1, 1e-3],
                ..ok.clone()
            }),
            ("lambda endpoint", SolverConfig {
                lambda_schedule: vec![0.0, 0.5],
                ..ok.clone()
            }),
            ("lambda range", SolverConfig {
                lambda_schedule: vec![-0.1, 1.0],
                ..ok.clone()
            }),
            ("j order", SolverConfig {
                j_schedule: vec![None, Some(4)],
                ..ok.clone()
            }),
            ("j too small", SolverConfig {
                j_schedule: vec![Some(1), None],
                ..ok.clone()
            }),
            ("tol", SolverConfig {
                picard_tol: 0.0,
                ..ok.clone()
            }),
            ("steps", SolverConfig {
                period_steps: 1,
                ..ok.clone()
            }),
        ];
        for (label, cfg) in cases {
            assert!(cfg.validate().is_err(), "{label} must be rejected");
        }
    }

    #[test]
    fn damped_solver_contracts_and_degenerates_to_zero() {
        let f = fix(4, 8, 20, 0.5);
        let m = models(&f);
        let quiet = solve_damped_linear(&f.config, &m, SourceField::None, None, 4, 0.1).unwrap();
        assert!(
            quiet.trace.iterations() <= 2,
            "zero data must converge immediately, took {}",
            quiet.trace.iterations()
        );
        assert_eq!(quiet.weighted_sup, 0.0, "zero data keeps the zero solution");

        let wall = WallModel::new(0.5, [1.0, 1.0], 0.03, TemporalShape::Sine).unwrap();
        let osc = OscillationSource {
            grid: &f.grid,
            cal: &f.cal,
            wall: &wall,
            flux_multiplier: [1.0, 1.0],
        };
        for (j, bar) in [(4u32, 0.85), (16, 0.95)] {
            let sol = solve_damped_linear(&f.config, &m, SourceField::None, Some(&osc), j, 0.1)
                .unwrap();
            let ratio = sol.trace.observed_ratio().expect("enough iterates");
            println!("j={j}: observed contraction ratio {ratio:.4}");
            assert!(
                ratio <= bar,
                "damped map at j={j} must contract with ratio <= {bar}, got {ratio:.4}"
            );
            assert!(
                sol.residual <= f.config.picard_tol * 10.0,
                "periodicity residual {:.3e} out of tolerance",
                sol.residual
            );
            assert!(sol.weighted_sup > 0.0, "the source must excite the state");
        }
        assert!(
            solve_damped_linear(&f.config, &m, SourceField::None, None, 1, 0.1).is_err(),
            "damping index below 2 is rejected"
        );
        assert!(
            solve_damped_linear(&f.config, &m, SourceField::None, None, 4, 0.0).is_err(),
            "zero penalty is rejected in the damped stage"
        );
    }

    #[test]
    fn linear_pipeline_matches_direct_and_stays_linear() {
        let f = fix(4, 8, 16, 0.4);
        let mut config = f.config.clone();
        config.picard_tol = 1e-12;
        let m = models(&f);
        let n_v = f.grid.len();
        let smu = sqrt_mu_table(&f.grid);
        // A volumetric source with exactly zero moment: the surrogate's range.
        let sample = DistributionField::from_fn(config.period_steps, 8, n_v, |t, x, v| {
            smu[v] * (0.6 + 0.4 * ((t as f64) * 0.37).cos()) * (0.3 + 0.1 * (x as f64 * 1.3).sin())
                * (1.0 + 0.2 * (v as f64 * 0.7).cos())
        });
        let mut g = DistributionField::zeros(config.period_steps, 8, n_v);
        for k in 0..config.period_steps {
            let row = sample.slice_t(k).to_vec();
            quadratic_source(&f.surrogate, n_v, &row, None, None, g.slice_t_mut(k));
        }
        let wall = WallModel::new(0.4, [1.0, 1.0], 0.02, TemporalShape::Cosine).unwrap();
        let osc = OscillationSource {
            grid: &f.grid,
            cal: &f.cal,
            wall: &wall,
            flux_multiplier: [1.0, 1.0],
        };
        let nested =
            solve_linear_periodic(&config, &m, SourceField::Periodic(&g), Some(&osc)).unwrap();
        let direct =
            solve_linear_periodic_direct(&config, &m, SourceField::Periodic(&g), Some(&osc))
                .unwrap();
        let gap = wdiff_state(
            nested.field.slice_t(0),
            direct.field.slice_t(0),
            &f.weights,
        );
        println!(
            "nested vs direct gap {gap:.3e} at solution scale {:.3e}",
            direct.weighted_sup
        );
        assert!(
            gap <= 10.0 * config.picard_tol,
            "continuation endpoint must agree with the direct solve, gap {gap:.3e}"
        );
        let c = nested.c_history.as_slice();
        assert!(c.len() >= 2, "one c estimate per penalty stage");
        let (a, b) = (c[c.len() - 2], c[c.len() - 1]);
        println!("stability constants across the last penalty stages: {a:.4} -> {b:.4}");
        assert!(
            (a - b).abs() <= 0.2 * b.abs(),
            "the stability constant must settle across the penalty endpoint"
        );
        // Doubling both sources must exactly double the solution.
        let mut g2 = g.clone();
        for v in g2.as_mut_slice() {
            *v *= 2.0;
        }
        let osc2 = OscillationSource {
            grid: &f.grid,
            cal: &f.cal,
            wall: &wall,
            flux_multiplier: [2.0, 2.0],
        };
        let doubled =
            solve_linear_periodic_direct(&config, &m, SourceField::Periodic(&g2), Some(&osc2))
                .unwrap();
        let mut defect = 0.0f64;
        for (a, b) in doubled
            .field
            .as_slice()
            .iter()
            .zip(direct.field.as_slice())
        {
            defect = defect.max((a - 2.0 * b).abs());
        }
        println!("linearity defect {defect:.3e}");
        assert!(
            defect <= 1e-8 * doubled.weighted_sup.max(1e-300),
            "doubling the sources must double the solution, defect {defect:.3e}"
        );
        let worst_mass = direct.slice_mass.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
        println!("worst slice mass {worst_mass:.3e}");
        assert!(
            worst_mass <= 1e-8 * direct.weighted_sup.max(1e-300),
            "slice masses must vanish at solution scale"
        );
    }

    #[test]
    fn steady_solver_degenerates_exactly_and_responds_linearly() {
        let f = fix(4, 8, 16, 0.4);
        let m = models(&f);
        let unit = solve_steady(&f.config, &m, [1.0, 1.0]).unwrap();
        assert_eq!(
            unit.weighted_sup, 0.0,
            "unit wall temperature must return the global equilibrium exactly"
        );
        assert!(unit.trace.iterations() <= 2, "and converge immediately");
        let s1 = solve_steady(&f.config, &m, [1.01, 1.01]).unwrap();
        let s2 = solve_steady(&f.config, &m, [1.02, 1.02]).unwrap();
        println!(
            "steady response: {:.4e} at 0.01, {:.4e} at 0.02, residuals {:.2e}/{:.2e}",
            s1.weighted_sup, s2.weighted_sup, s1.residual, s2.residual
        );
        assert!(s1.weighted_sup > 0.0, "a warm wall must excite a profile");
        let ratio = s2.weighted_sup / s1.weighted_sup;
        assert!(
            (1.5..=2.5).contains(&ratio),
            "doubling the temperature offset must roughly double the response, ratio {ratio:.3}"
        );
        assert!(
            s2.mass.abs() <= 1e-8 * mu_total_mass(&f.grid, 1.0 / 8.0, 8),
            "steady mass must match the equilibrium mass, got {:.3e}",
            s2.mass
        );
        assert!(
            s2.residual <= 10.0 * f.config.picard_tol,
            "steady residual {:.3e} out of tolerance",
            s2.residual
        );
        let warm = solve_steady(&f.config, &m, [1.12, 1.12]).unwrap();
        assert!(
            !warm.trace.warnings.is_empty(),
            "a wall far from equilibrium must warn"
        );
    }

    #[test]
    fn oscillatory_solver_follows_the_linear_response_law() {
        let f = fix(4, 8, 16, 0.4);
        let m = models(&f);
        let steady = solve_steady(&f.config, &m, [1.02, 1.02]).unwrap();
        let wall = WallModel::new(0.4, [1.02, 1.02], 0.02, TemporalShape::Sine).unwrap();
        let sol = solve_periodic_nonlinear(&f.config, &m, &wall, &steady).unwrap();
        println!(
            "oscillatory solve: sup {:.4e}, residual {:.2e}, c {:?}, {} outer iterates",
            sol.weighted_sup,
            sol.residual,
            sol.c_estimate,
            sol.trace.iterations()
        );
        assert!(sol.weighted_sup > 0.0, "the oscillation must excite the state");
        assert!(
            sol.residual <= 10.0 * f.config.picard_tol,
            "periodicity residual {:.3e} out of tolerance",
            sol.residual
        );
        if let Some(ratio) = sol.trace.observed_ratio() {
            println!("outer contraction ratio {ratio:.4}");
            assert!(ratio <= 0.7, "outer iteration must contract, ratio {ratio:.4}");
        }
        // Halving the oscillation amplitude halves the response.
        let wall_half = WallModel::new(0.4, [1.02, 1.02], 0.01, TemporalShape::Sine).unwrap();
        let half = solve_periodic_nonlinear(&f.config, &m, &wall_half, &steady).unwrap();
        let ratio = sol.weighted_sup / half.weighted_sup;
        println!("amplitude response ratio {ratio:.3}");
        assert!(
            (1.5..=2.5).contains(&ratio),
            "halving delta1 must halve the oscillatory norm, ratio {ratio:.3}"
        );
        // Zero oscillation degenerates to the steady solution.
        let wall_zero = WallModel::new(0.4, [1.02, 1.02], 0.0, TemporalShape::Sine).unwrap();
        let frozen = solve_periodic_nonlinear(&f.config, &m, &wall_zero, &steady).unwrap();
        assert!(
            frozen.weighted_sup <= 10.0 * f.config.picard_tol,
            "zero amplitude must reproduce the steady state, leftover {:.3e}",
            frozen.weighted_sup
        );
        assert!(frozen.c_estimate.is_none(), "no response constant without drive");
        // The full distribution stays nonnegative at small data.
        let smu = sqrt_mu_table(&f.grid);
        let n_v = f.grid.len();
        let mut worst = f64::INFINITY;
        for k in [0, sol.n_steps() / 2, sol.n_steps()] {
            let total = sol.total_slice(k);
            for (p, row) in total.chunks_exact(n_v).enumerate() {
                let _ = p;
                for (v, val) in row.iter().enumerate() {
                    worst = worst.min(smu[v] * smu[v] + smu[v] * val);
                }
            }
        }
        println!("smallest distribution value {worst:.3e}");
        assert!(
            worst >= -1e-10,
            "small wall data must keep the distribution nonnegative, min {worst:.3e}"
        );
        // A hopeless amplitude guard trips the blow-up detector.
        let mut tight = f.config.clone();
        tight.amplitude_factor = 1.0;
        tight.picard_tol = 1e-30;
        tight.max_picard = 3;
        let outcome = solve_periodic_nonlinear(&tight, &m, &wall, &steady);
        assert!(outcome.is_err(), "an unreachable tolerance must error, not spin");
    }

    #[test]
    fn evolution_decays_bumps_and_preserves_mass() {
        let f = fix(4, 8, 12, 0.3);
        let m = models(&f);
        let steady = solve_steady(&f.config, &m, [1.02, 1.02]).unwrap();
        let wall = WallModel::new(0.3, [1.02, 1.02], 0.02, TemporalShape::Sine).unwrap();
        let background = solve_periodic_nonlinear(&f.config, &m, &wall, &steady).unwrap();
        let n_v = f.grid.len();
        let smu = sqrt_mu_table(&f.grid);
        let raw: Vec<f64> = (0..8 * n_v)
            .map(|p| smu[p % n_v] * f.grid.node(p % n_v)[0])
            .collect();
        let scale = 5e-3 / wsup_state(&raw, &f.weights);
        let bump: Vec<f64> = raw.iter().map(|v| v * scale).collect();

        let zero = evolve_ivp(&f.config, &m, &wall, &background, &vec![0.0; 8 * n_v], 2, false)
            .unwrap();
        assert!(
            zero.norms.iter().all(|s| s.weighted_sup == 0.0),
            "zero initial data must stay exactly zero"
        );

        let run = evolve_ivp(&f.config, &m, &wall, &background, &bump, 3, true).unwrap();
        let steps = f.config.period_steps;
        let first = run.norms[..=steps]
            .iter()
            .map(|s| s.weighted_sup)
            .fold(0.0, f64::max);
        let last = run.norms[2 * steps..]
            .iter()
            .map(|s| s.weighted_sup)
            .fold(0.0, f64::max);
        println!("bump norm: first period {first:.4e}, last period {last:.4e}");
        assert!(
            last < first,
            "the bump must decay across the horizon ({first:.3e} -> {last:.3e})"
        );
        let drift = run
            .norms
            .iter()
            .map(|s| (s.mass - run.norms[0].mass).abs())
            .fold(0.0, f64::max);
        println!("mass drift over the march {drift:.3e}");
        assert!(
            drift <= 1e-8 * first.max(1e-300),
            "the march must conserve the moment, drift {drift:.3e}"
        );
        let gap = run.verification_gap.expect("verification requested");
        println!("function-space sweep gap {gap:.4}");
        assert!(
            gap <= 0.05,
            "three lagged sweeps must track the march within 5%, gap {gap:.4}"
        );

        let double: Vec<f64> = bump.iter().map(|v| 2.0 * v).collect();
        let run2 = evolve_ivp(&f.config, &m, &wall, &background, &double, 1, false).unwrap();
        let r1 = run.norms[steps].weighted_sup;
        let r2 = run2.norms[steps].weighted_sup;
        let ratio = r2 / r1;
        println!("early-time doubling ratio {ratio:.3}");
        assert!(
            (1.4..=2.6).contains(&ratio),
            "doubling the bump must roughly double early norms, ratio {ratio:.3}"
        );
    }

    #[test]
    fn lemma_check_certifies_and_pinpoints_violations() {
        // A constant sequence sitting exactly on the additive constant.
        let d = 0.3;
        let seq = vec![d; 12];
        for k in [0usize, 1, 2] {
            // The certified value carries the floor term plus whatever is
            // left of the head after floor((n-k-1)/(k+1)) decay rounds.
            let head_left = d * 0.125f64.powi(((seq.len() - k - 1) / (k + 1)) as i32);
            match iteration_lemma_check(&seq, k, d).unwrap() {
                LemmaOutcome::Certified { bound } => {
                    assert!(
                        bound >= d && bound <= (8.0 + k as f64) / 7.0 * d + head_left + 1e-12,
                        "constant sequence certifies at its own scale, bound {bound}"
                    );
                }
                other => panic!("constant sequence must certify, got {other:?}"),
            }
        }
        // Pure geometric decay with no additive floor.
        let geo: Vec<f64> = (0..12).map(|i| 0.125f64.powi(i)).collect();
        match iteration_lemma_check(&geo, 0, 0.0).unwrap() {
            LemmaOutcome::Certified { bound } => {
                assert!(
                    (bound - 0.125f64.powi(11)).abs() <= 1e-20,
                    "geometric decay certifies its tail value, bound {bound:.3e}"
                );
            }
            other => panic!("geometric sequence must certify, got {other:?}"),
        }
        // A flat sequence of ones cannot satisfy the hypothesis at all.
        assert_eq!(
            iteration_lemma_check(&[1.0; 10], 0, 0.0).unwrap(),
            LemmaOutcome::Violated { index: 0 },
            "ones violate immediately"
        );
        // A constructed violation deeper in the sequence is located exactly.
        let k = 1;
        let d2 = 0.01;
        let mut seq = vec![1.0, 0.9];
        for i in 0..10 {
            let window: f64 = seq[i..=i + k].iter().fold(0.0, |a: f64, &b| a.max(b));
            let next = if i == 6 {
                window / 8.0 + d2 + 0.05
            } else {
                window / 8.0 + 0.5 * d2
            };
            seq.push(next);
        }
        assert_eq!(
            iteration_lemma_check(&seq, k, d2).unwrap(),
            LemmaOutcome::Violated { index: 6 },
            "the first failing index must be reported"
        );
        // Input validation.
        assert!(iteration_lemma_check(&[0.5, 0.1], 1, 0.0).is_err(), "too short");
        assert!(
            iteration_lemma_check(&[0.5, -0.1, 0.2, 0.1], 0, 0.0).is_err(),
            "negative entries are rejected"
        );
        assert!(
            iteration_lemma_check(&[0.5, 0.1, 0.2, 0.1], 0, -1.0).is_err(),
            "negative additive constant is rejected"
        );
    }
}
