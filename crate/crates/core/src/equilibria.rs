//! Maxwellians, oscillating wall temperatures, and flux-calibrated emission.
//!
//! The normalizations follow the unit-flux convention: the global Maxwellian is
//! `mu(v) = (2 pi)^{-1} exp(-|v|^2 / 2)` and the wall Maxwellian at temperature
//! `theta` is `mu_theta(v) = (2 pi theta^2)^{-1} exp(-|v|^2 / (2 theta))`, so in
//! the continuum every `mu_theta` carries exactly unit flux through a wall:
//! `int_{v.n > 0} mu_theta |v.n| dv = 1`.
//!
//! On a finite lattice the plain node sum of that flux is close to 1 but not
//! equal to it, and the defect differs between temperatures. Left alone this
//! would contaminate every boundary identity with quadrature residue. The fix,
//! implemented by [`BoundaryCalibration`], is relative flux calibration:
//!
//! * the discrete flux functional divides by `c`, the node-sum flux of `mu`
//!   itself, so the Maxwellian emits exactly unit discrete flux;
//! * emitted wall profiles are rescaled, `mu_hat_theta = mu_theta * c / c_theta`,
//!   so every temperature emits exactly the same discrete flux as `mu`.
//!
//! With both pieces in place the diffuse-reflection operator reproduces
//! `sqrt_mu` exactly, the temperature correction kernel carries exactly zero
//! flux, and total wall in-flux equals total out-flux in exact arithmetic,
//! which is what the marching solvers lean on.

use std::fmt;
use std::sync::Arc;

use crate::error::Error;
use crate::quad::gl4;
use crate::vgrid::{Side, VelocityGrid};
use crate::{Result, Scalar};

/// Global Maxwellian `mu` at squared speed `s = |v|^2`.
pub fn global_maxwellian<S: Scalar>(speed_sq: S) -> S {
    (-speed_sq / S::c(2.0)).exp() / S::c(std::f64::consts::TAU)
}

/// Square root of the global Maxwellian at squared speed `s`.
pub fn sqrt_mu<S: Scalar>(speed_sq: S) -> S {
    let inv_sqrt_two_pi = S::c(1.0 / std::f64::consts::TAU.sqrt());
    (-speed_sq / S::c(4.0)).exp() * inv_sqrt_two_pi
}

/// Wall Maxwellian at temperature `theta` and squared speed `s`.
///
/// Written so that `theta = 1` reproduces [`global_maxwellian`] bitwise; the
/// correction kernels difference the two and must vanish identically there.
pub fn wall_maxwellian<S: Scalar>(theta: f64, speed_sq: S) -> S {
    (-speed_sq / S::c(2.0 * theta)).exp() / S::c(std::f64::consts::TAU * theta * theta)
}

/// Dual weight `1 / (w(v) sqrt_mu(v))`, the natural scale for pointwise bounds
/// on weighted perturbations. With `q = beta = 0` its value at `v = 0` is
/// `sqrt(2 pi)`.
pub fn dual_weight<S: Scalar>(spec: &crate::vgrid::WeightSpec, speed_sq: S) -> S {
    (spec.eval_sq(speed_sq) * sqrt_mu(speed_sq)).recip()
}

/// Table of `mu` over a grid.
pub fn mu_table<S: Scalar>(grid: &VelocityGrid<S>) -> Vec<S> {
    (0..grid.len()).map(|i| global_maxwellian(grid.speed_sq(i))).collect()
}

/// Table of `sqrt_mu` over a grid.
pub fn sqrt_mu_table<S: Scalar>(grid: &VelocityGrid<S>) -> Vec<S> {
    (0..grid.len()).map(|i| sqrt_mu(grid.speed_sq(i))).collect()
}

/// Periodic temperature waveform, evaluated on the phase in `[0, 1)`.
#[derive(Clone)]
pub enum TemporalShape {
    Sine,
    Cosine,
    Triangle,
    /// User-supplied waveform of the phase; must map `[0, 1)` into `[-1, 1]`.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl TemporalShape {
    pub fn eval(&self, phase: f64) -> f64 {
        match self {
            TemporalShape::Sine => (std::f64::consts::TAU * phase).sin(),
            TemporalShape::Cosine => (std::f64::consts::TAU * phase).cos(),
            TemporalShape::Triangle => {
                if phase < 0.25 {
                    4.0 * phase
                } else if phase < 0.75 {
                    2.0 - 4.0 * phase
                } else {
                    4.0 * phase - 4.0
                }
            }
            TemporalShape::Custom(f) => f(phase),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TemporalShape::Sine => "sin",
            TemporalShape::Cosine => "cos",
            TemporalShape::Triangle => "triangle",
            TemporalShape::Custom(_) => "custom",
        }
    }
}

impl fmt::Debug for TemporalShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Time-periodic wall temperatures `theta_w(t) = theta_bar_w + delta1 s(t/T)`.
///
/// `delta1` is the oscillation amplitude (identical for both walls, possibly
/// zero) and `delta2 = max_w |theta_bar_w - 1|` the static offset from the
/// reference temperature. The small-amplitude guard `delta1 + delta2 < 1/2`
/// keeps the model inside the perturbative regime the solvers are built for;
/// it can be disabled explicitly, in which case only positivity of the
/// temperature is enforced.
#[derive(Debug, Clone)]
pub struct WallModel<S> {
    period: f64,
    theta_bar: [f64; 2],
    delta1: f64,
    shape: TemporalShape,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> WallModel<S> {
    pub fn new(period: f64, theta_bar: [f64; 2], delta1: f64, shape: TemporalShape) -> Result<Self> {
        Self::build(period, theta_bar, delta1, shape, true)
    }

    /// Constructor with the small-amplitude guard disabled.
    pub fn new_unguarded(
        period: f64,
        theta_bar: [f64; 2],
        delta1: f64,
        shape: TemporalShape,
    ) -> Result<Self> {
        Self::build(period, theta_bar, delta1, shape, false)
    }

    fn build(
        period: f64,
        theta_bar: [f64; 2],
        delta1: f64,
        shape: TemporalShape,
        guarded: bool,
    ) -> Result<Self> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::config(format!("period must be positive, got {period}")));
        }
        if !(delta1 >= 0.0) {
            return Err(Error::config(format!(
                "oscillation amplitude delta1 must be nonnegative, got {delta1}"
            )));
        }
        let delta2 = (theta_bar[0] - 1.0).abs().max((theta_bar[1] - 1.0).abs());
        if guarded && delta1 + delta2 >= 0.5 {
            return Err(Error::config(format!(
                "temperature amplitudes outside the small-data regime: delta1 + delta2 = {:.4} >= 1/2 \
                 (use the unguarded constructor to override)",
                delta1 + delta2
            )));
        }
        for th in theta_bar {
            if !(th - delta1 > 0.0) {
                return Err(Error::config(format!(
                    "wall temperature can reach {} <= 0 (theta_bar {th}, delta1 {delta1})",
                    th - delta1
                )));
            }
        }
        Ok(WallModel {
            period,
            theta_bar,
            delta1,
            shape,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn delta1(&self) -> f64 {
        self.delta1
    }

    pub fn delta2(&self) -> f64 {
        (self.theta_bar[0] - 1.0).abs().max((self.theta_bar[1] - 1.0).abs())
    }

    pub fn theta_bar(&self, side: Side) -> f64 {
        self.theta_bar[side.index()]
    }

    pub fn shape(&self) -> &TemporalShape {
        &self.shape
    }

    /// Instantaneous temperature of `side` at absolute time `t`.
    ///
    /// The phase is reduced with `rem_euclid`, so shifting `t` by a multiple of
    /// the period reproduces the same value whenever the reduction is exact in
    /// floating point (dyadic `t / period`, in particular).
    pub fn theta(&self, t: f64, side: Side) -> f64 {
        let phase = t.rem_euclid(self.period) / self.period;
        self.theta_bar[side.index()] + self.delta1 * self.shape.eval(phase)
    }

    /// A copy with the oscillation amplitude replaced (static offsets kept).
    pub fn with_delta1(&self, delta1: f64) -> Result<Self> {
        Self::build(self.period, self.theta_bar, delta1, self.shape.clone(), false)
    }
}

/// Discrete half-fluxes of the Maxwellian through each wall, plus everything
/// built on top of them (calibrated emission, correction kernels, the flux
/// functional and diffuse-reflection operator).
#[derive(Debug, Clone)]
pub struct BoundaryCalibration<S> {
    /// Node-sum flux `c = sum_in mu |v_x| h^3` per side.
    c_mu: [S; 2],
}

impl<S: Scalar> BoundaryCalibration<S> {
    pub fn new(grid: &VelocityGrid<S>) -> Self {
        let c_mu = [
            Self::raw_half_flux(grid, Side::Left, 1.0),
            Self::raw_half_flux(grid, Side::Right, 1.0),
        ];
        BoundaryCalibration { c_mu }
    }

    /// Node-sum incoming flux of `mu_theta` through `side`.
    pub fn raw_half_flux(grid: &VelocityGrid<S>, side: Side, theta: f64) -> S {
        let mut sum = S::zero();
        for &i in grid.incoming(side) {
            let v = grid.node(i as usize);
            sum += wall_maxwellian(theta, grid.speed_sq(i as usize)) * v[0].abs();
        }
        sum * grid.cell_volume()
    }

    /// The unit-temperature flux constant `c` of `side`.
    pub fn c_mu(&self, side: Side) -> S {
        self.c_mu[side.index()]
    }

    /// Calibrated flux functional `phi_hat(trace) = sum_out trace sqrt_mu |v_x| h^3 / c`.
    ///
    /// Applied to the wall trace of a perturbation `f`, this is the outgoing
    /// flux of `sqrt_mu f` normalized so that `f = sqrt_mu` gives exactly 1.
    pub fn outgoing_flux(
        &self,
        grid: &VelocityGrid<S>,
        sqrt_mu: &[S],
        side: Side,
        trace: &[S],
    ) -> S {
        debug_assert_eq!(trace.len(), grid.len());
        let mut sum = S::zero();
        for &i in grid.outgoing(side) {
            let i = i as usize;
            let v = grid.node(i);
            sum += trace[i] * sqrt_mu[i] * v[0].abs();
        }
        sum * grid.cell_volume() / self.c_mu[side.index()]
    }

    /// Calibrated emission profile `mu_hat_theta = mu_theta c / c_theta`,
    /// nonzero on the incoming half of `side` only.
    pub fn emission_profile(&self, grid: &VelocityGrid<S>, side: Side, theta: f64) -> Vec<S> {
        let c_theta = Self::raw_half_flux(grid, side, theta);
        let scale = self.c_mu[side.index()] / c_theta;
        let mut out = vec![S::zero(); grid.len()];
        for &i in grid.incoming(side) {
            let i = i as usize;
            out[i] = wall_maxwellian(theta, grid.speed_sq(i)) * scale;
        }
        out
    }

    /// Temperature correction kernel `(mu_hat_theta - mu) / sqrt_mu` on the
    /// incoming half of `side`. Identically zero at `theta = 1`, and its
    /// calibrated flux vanishes exactly for every `theta`.
    pub fn correction_kernel(&self, grid: &VelocityGrid<S>, side: Side, theta: f64) -> Vec<S> {
        let mut out = self.emission_profile(grid, side, theta);
        for &i in grid.incoming(side) {
            let i = i as usize;
            let s = grid.speed_sq(i);
            out[i] = (out[i] - global_maxwellian(s)) / sqrt_mu(s);
        }
        out
    }

    /// Oscillation source `r(t) = (mu_hat_{theta(t)} - mu_hat_{theta_bar}) / sqrt_mu`
    /// times the steady flux multiplier, on the incoming half of `side`.
    ///
    /// Both emission profiles are calibrated, so the profile carries exactly
    /// zero calibrated flux, and it vanishes identically when the oscillation
    /// amplitude is zero.
    pub fn oscillation_source(
        &self,
        grid: &VelocityGrid<S>,
        side: Side,
        theta_t: f64,
        theta_bar: f64,
        flux_multiplier: S,
    ) -> Vec<S> {
        let hot = self.emission_profile(grid, side, theta_t);
        let mut base = self.emission_profile(grid, side, theta_bar);
        for &i in grid.incoming(side) {
            let i = i as usize;
            base[i] = (hot[i] - base[i]) / sqrt_mu(grid.speed_sq(i)) * flux_multiplier;
        }
        base
    }
}

/// Incoming flux of `mu_theta` integrated with 4-point Gauss-Legendre panels
/// over every half-grid cell (instead of node sums). In the continuum the flux
/// is exactly 1 for every temperature; this quadrature reproduces it to the
/// truncation error of the velocity box, which is what makes it the right
/// yardstick for grid-resolution checks.
///
/// Requires an even axis count so the half-grid cells tile `[0, v_max]`.
pub fn cell_integrated_half_flux<S: Scalar>(grid: &VelocityGrid<S>, theta: f64) -> Result<f64> {
    let n = grid.n_per_axis();
    if n % 2 != 0 {
        return Err(Error::config(format!(
            "cell-integrated flux needs an even axis count, got {n}"
        )));
    }
    let h = grid.spacing();
    let v_max = grid.v_max();
    // The integrand separates: mu_theta |v_x| = norm * (e^{-s^2/2theta} s) x
    // (e^{-s^2/2theta}) x (e^{-s^2/2theta}).
    let mut ix = 0.0;
    for k in 0..n / 2 {
        let a = k as f64 * h;
        ix += gl4(a, a + h, |s| (-s * s / (2.0 * theta)).exp() * s);
    }
    let mut iperp = 0.0;
    for k in 0..n {
        let a = -v_max + k as f64 * h;
        iperp += gl4(a, a + h, |s| (-s * s / (2.0 * theta)).exp());
    }
    Ok(ix * iperp * iperp / (std::f64::consts::TAU * theta * theta))
}
