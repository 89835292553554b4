//! Decay-rate fitting and statistical audit helpers.
//!
//! The centerpiece is [`fit_decay`], which fits the stretched-exponential
//! model `y(t) ~ C exp(-c t^rho)` to a norm history by golden-section search
//! over `rho` with an exact linear least-squares solve for `(log C, c)` at
//! each candidate. [`rho_target`] gives the stretching exponent the theory
//! predicts for a given potential: plain exponential for hard potentials,
//! `2/(2+|gamma|)` for soft ones.
//!
//! The module also carries the error function (series plus continued
//! fraction, accurate in the far tail where the velocity-box truncation
//! diagnostics live), the Kolmogorov-Smirnov statistic used by the sampling
//! audits, and the truncated-mass diagnostic.

use crate::equilibria::sqrt_mu_table;
use crate::error::Error;
use crate::solvers::PeriodicSolution;
use crate::vgrid::{mass_moment, DistributionField, VelocityGrid};
use crate::{Result, Scalar};

/// Error function, accurate to close to machine precision for all arguments.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        -erf(-x)
    } else if x < 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function with full relative accuracy in the tail.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Maclaurin series, used for `0 <= x < 2` where it converges rapidly and no
/// cancellation occurs.
fn erf_series(x: f64) -> f64 {
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= -x2 / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 * sum.abs() {
            return two_over_sqrt_pi * sum;
        }
        n += 1.0;
        if n > 200.0 {
            return two_over_sqrt_pi * sum;
        }
    }
}

/// Continued fraction `erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`
/// evaluated with the modified Lentz algorithm; relative accuracy is machine
/// level for `x >= 2`.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f: f64 = tiny;
    let mut c = f;
    let mut d = 0.0;
    let mut n = 1usize;
    loop {
        let a = if n == 1 { 1.0 } else { (n - 1) as f64 / 2.0 };
        let b = x;
        d = b + a * d;
        if d == 0.0 {
            d = tiny;
        }
        c = b + a / c;
        if c == 0.0 {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 || n > 300 {
            break;
        }
        n += 1;
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() * f
}

/// Fraction of the unit-mass Maxwellian lying outside the cube
/// `[-v_max, v_max]^3`: `1 - erf(v_max / sqrt 2)^3`.
pub fn truncated_mass_fraction(v_max: f64) -> f64 {
    let e = erf(v_max / std::f64::consts::SQRT_2);
    1.0 - e * e * e
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against the CDF.
/// Sorts the slice in place.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("samples must not contain NaN"));
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic critical value of the KS statistic at significance `alpha`:
/// `sqrt(-ln(alpha/2)/2) / sqrt(n)`. Accurate for the sample sizes the audits
/// use (tens of thousands and up).
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt() / (n as f64).sqrt()
}

/// Result of a stretched-exponential fit `log y = log C - c t^rho`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DecayFit {
    /// Stretching exponent.
    pub rho: f64,
    /// Decay coefficient `c` (positive for decaying data).
    pub rate: f64,
    /// Fitted `log C`.
    pub log_amplitude: f64,
    /// Residual sum of squares in log space.
    pub rss: f64,
    /// Number of points inside the fit window.
    pub n_points: usize,
    /// Time span of the fit window.
    pub window: (f64, f64),
}

/// Fits `y ~ C exp(-c t^rho)` on the window `t >= t_min`, `y > floor`.
///
/// The window exists to skip the initial transient (`t_min`) and the
/// round-off floor where a norm history flattens out (`floor`); points outside
/// it carry no information about the decay law.
pub fn fit_decay(ts: &[f64], ys: &[f64], t_min: f64, floor: f64) -> Result<DecayFit> {
    if ts.len() != ys.len() {
        return Err(Error::Dimension {
            context: "fit_decay series",
            expected: ts.len(),
            got: ys.len(),
        });
    }
    let mut t_w = Vec::new();
    let mut logy_w = Vec::new();
    for (&t, &y) in ts.iter().zip(ys) {
        if t >= t_min && t >= 0.0 && y > floor && y.is_finite() {
            t_w.push(t);
            logy_w.push(y.ln());
        }
    }
    let n = t_w.len();
    if n < 8 {
        return Err(Error::FitInvalid(format!(
            "only {n} usable points after applying t >= {t_min} and y > {floor:.3e}; need at least 8"
        )));
    }
    let spread = logy_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - logy_w.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 0.02 {
        return Err(Error::FitInvalid(format!(
            "series is flat over the window (log spread {spread:.2e}); no decay to fit"
        )));
    }

    // Linear least squares for (log C, c) at fixed rho; returns (rss, c, logC).
    let solve_at = |rho: f64| -> (f64, f64, f64) {
        let nf = n as f64;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut t0 = 0.0;
        let mut t1 = 0.0;
        for (&t, &l) in t_w.iter().zip(&logy_w) {
            let phi = t.powf(rho);
            s1 += phi;
            s2 += phi * phi;
            t0 += l;
            t1 += phi * l;
        }
        let denom = s2 - s1 * s1 / nf;
        if denom <= 1e-14 * s2.max(1.0) {
            return (f64::INFINITY, 0.0, 0.0);
        }
        let c = (s1 * t0 / nf - t1) / denom;
        let log_c0 = (t0 + c * s1) / nf;
        let mut rss = 0.0;
        for (&t, &l) in t_w.iter().zip(&logy_w) {
            let r = l - (log_c0 - c * t.powf(rho));
            rss += r * r;
        }
        (rss, c, log_c0)
    };

    // Golden-section search over the stretching exponent.
    let golden = 0.5 * (5.0f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.05, 1.5);
    let mut x1 = b - golden * (b - a);
    let mut x2 = a + golden * (b - a);
    let mut f1 = solve_at(x1).0;
    let mut f2 = solve_at(x2).0;
    for _ in 0..90 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - golden * (b - a);
            f1 = solve_at(x1).0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + golden * (b - a);
            f2 = solve_at(x2).0;
        }
    }
    let rho = 0.5 * (a + b);
    let (rss, rate, log_amplitude) = solve_at(rho);
    if !rss.is_finite() {
        return Err(Error::FitInvalid("degenerate time window".into()));
    }
    Ok(DecayFit {
        rho,
        rate,
        log_amplitude,
        rss,
        n_points: n,
        window: (t_w[0], t_w[n - 1]),
    })
}

/// Stretching exponent the decay theory predicts: 1 for `0 <= gamma <= 1`,
/// `2 / (2 + |gamma|)` for soft potentials `-3 < gamma < 0`.
pub fn rho_target(gamma: f64) -> f64 {
    assert!(
        gamma > -3.0 && gamma <= 1.0,
        "potential exponent {gamma} outside (-3, 1]"
    );
    if gamma >= 0.0 {
        1.0
    } else {
        2.0 / (2.0 + gamma.abs())
    }
}

/// Least-squares slope of `ln y` against `ln x`, the exponent of a power-law
/// fit `y ~ x^p`. Both coordinates must be strictly positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::FitInvalid(format!(
            "power-law fit needs two matching samples at least, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::FitInvalid(
            "power-law fit needs strictly positive finite coordinates".into(),
        ));
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::FitInvalid(
            "power-law fit needs at least two distinct abscissas".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// Minimum of the reassembled distribution and where it sits.
#[derive(Debug, Clone, Copy)]
pub struct PositivityReport {
    pub min_value: f64,
    pub max_value: f64,
    /// Location of the minimum as (time slice, space cell, velocity node).
    pub t_slice: usize,
    pub x_cell: usize,
    pub v_node: usize,
    /// Minimum at least `-1e-10` times the maximum.
    pub pass: bool,
}

/// Scans the full distribution `mu + sqrt(mu) (f_steady + f_osc)` behind a
/// periodic solution for negative values. Small wall data must keep it
/// nonnegative up to rounding; the report locates the worst node either way.
pub fn positivity_audit<S: Scalar>(
    sol: &PeriodicSolution<S>,
    grid: &VelocityGrid<S>,
) -> PositivityReport {
    let smu = sqrt_mu_table(grid);
    let n_v = grid.len();
    let mut report = PositivityReport {
        min_value: f64::INFINITY,
        max_value: f64::NEG_INFINITY,
        t_slice: 0,
        x_cell: 0,
        v_node: 0,
        pass: false,
    };
    for k in 0..=sol.n_steps() {
        let total = sol.total_slice(k);
        for (x, row) in total.chunks_exact(n_v).enumerate() {
            for (v, f) in row.iter().enumerate() {
                let value = (smu[v] * smu[v] + smu[v] * *f).to_f64_lossy();
                if value < report.min_value {
                    report.min_value = value;
                    report.t_slice = k;
                    report.x_cell = x;
                    report.v_node = v;
                }
                report.max_value = report.max_value.max(value);
            }
        }
    }
    report.pass = report.min_value >= -1e-10 * report.max_value;
    report
}

/// Mass moment of every slice of a trajectory.
#[derive(Debug, Clone)]
pub struct MassAudit {
    /// `sum f sqrt(mu)` over the slab, one entry per time slice.
    pub series: Vec<f64>,
    /// Largest absolute slice mass.
    pub max_abs: f64,
    /// Largest absolute deviation from the first slice.
    pub max_drift: f64,
}

/// Evaluates the zero-mass condition slice by slice. Anchored solver output
/// keeps every entry at rounding scale; a drifting series points at a flux
/// defect or missing anchoring.
pub fn mass_audit<S: Scalar>(
    traj: &DistributionField<S>,
    grid: &VelocityGrid<S>,
    dx: f64,
) -> Result<MassAudit> {
    if traj.n_t < 2 {
        return Err(Error::config(
            "mass audit needs a trajectory with at least two slices",
        ));
    }
    let smu = sqrt_mu_table(grid);
    let series: Vec<f64> = (0..traj.n_t)
        .map(|k| mass_moment(traj.slice_t(k), grid, dx, &smu).to_f64_lossy())
        .collect();
    let max_abs = series.iter().fold(0.0f64, |a, &m| a.max(m.abs()));
    let max_drift = series
        .iter()
        .fold(0.0f64, |a, &m| a.max((m - series[0]).abs()));
    Ok(MassAudit {
        series,
        max_abs,
        max_drift,
    })
}
