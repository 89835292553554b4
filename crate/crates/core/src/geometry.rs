//! Spatial domains, backward characteristics, and diffuse-reflection sampling.
//!
//! Two domain representations are supported: the slab `0 < x_1 < length`
//! (infinite in the other two directions), which the transport solvers use,
//! and a general bounded domain given by a signed level set (`phi < 0` inside),
//! for which exit times are found by marching plus bisection plus Newton
//! polish. Backward time cycles chain exit times with diffuse resampling at
//! every wall hit; they are the sampling skeleton behind boundary-decay
//! estimates.
//!
//! Conventions: normals point into the domain. A diffuse emission sample `w`
//! satisfies `w . n > 0` with Rayleigh-distributed normal speed and Gaussian
//! tangential components; the backward walk uses the mirrored sample (normal
//! component flipped) because tracing back in time enters the domain through
//! velocities that point at the wall.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::Error;
use crate::rng::{substream, uniform_open01, NormalSource};
use crate::Result;

/// Bounded spatial domain.
#[derive(Clone)]
pub enum DomainShape {
    /// `0 < x_1 < length`, translation-invariant in `x_2, x_3`.
    Slab { length: f64 },
    /// `phi(x) < 0` inside; `bounding_diameter` bounds every chord length.
    LevelSet {
        phi: Arc<dyn Fn([f64; 3]) -> f64 + Send + Sync>,
        bounding_diameter: f64,
    },
}

impl fmt::Debug for DomainShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainShape::Slab { length } => write!(f, "Slab {{ length: {length} }}"),
            DomainShape::LevelSet { bounding_diameter, .. } => {
                write!(f, "LevelSet {{ bounding_diameter: {bounding_diameter} }}")
            }
        }
    }
}

impl DomainShape {
    pub fn slab(length: f64) -> Self {
        DomainShape::Slab { length }
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        match self {
            DomainShape::Slab { length } => x[0] > 0.0 && x[0] < *length,
            DomainShape::LevelSet { phi, .. } => phi(x) < 0.0,
        }
    }

    /// Time for the backward ray `x - v tau` to reach the boundary.
    pub fn backward_exit_time(&self, x: [f64; 3], v: [f64; 3]) -> Result<f64> {
        match self {
            DomainShape::Slab { length } => {
                let xc = x[0].clamp(0.0, *length);
                if v[0] > 0.0 {
                    Ok(xc / v[0])
                } else if v[0] < 0.0 {
                    Ok((xc - *length) / v[0])
                } else {
                    Err(Error::InfiniteExitTime { x, v })
                }
            }
            DomainShape::LevelSet { phi, bounding_diameter } => {
                let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if speed == 0.0 {
                    return Err(Error::InfiniteExitTime { x, v });
                }
                let at = |tau: f64| phi([x[0] - v[0] * tau, x[1] - v[1] * tau, x[2] - v[2] * tau]);
                // March in chord-scale steps until the level set changes sign.
                let step = bounding_diameter / (64.0 * speed);
                let tau_max = 1.5 * bounding_diameter / speed;
                let mut lo = 0.0;
                let mut s_lo = at(0.0);
                let mut hi = None;
                let mut tau = step;
                while tau <= tau_max {
                    let s = at(tau);
                    if s >= 0.0 && s_lo < 0.0 {
                        hi = Some(tau);
                        break;
                    }
                    lo = tau;
                    s_lo = s;
                    tau += step;
                }
                let mut hi = match hi {
                    Some(h) => h,
                    None => {
                        // Starting on (or numerically past) the boundary with an
                        // outward backward ray exits immediately.
                        if s_lo >= 0.0 {
                            return Ok(0.0);
                        }
                        return Err(Error::InfiniteExitTime { x, v });
                    }
                };
                // Bisection to near machine precision on the chord scale.
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if at(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-14 * tau_max {
                        break;
                    }
                }
                // Two Newton polish steps with a finite-difference derivative.
                let mut root = 0.5 * (lo + hi);
                let fd = 1e-7 * bounding_diameter / speed;
                for _ in 0..2 {
                    let g = at(root);
                    let dg = (at(root + fd) - at(root - fd)) / (2.0 * fd);
                    if dg.abs() > 0.0 {
                        root -= g / dg;
                    }
                }
                Ok(root.clamp(0.0, tau_max))
            }
        }
    }

    /// Inward unit normal at a boundary point.
    pub fn inward_normal(&self, x: [f64; 3]) -> [f64; 3] {
        match self {
            DomainShape::Slab { length } => {
                if x[0] <= 0.5 * length {
                    [1.0, 0.0, 0.0]
                } else {
                    [-1.0, 0.0, 0.0]
                }
            }
            DomainShape::LevelSet { phi, bounding_diameter } => {
                let d = 1e-6 * bounding_diameter;
                let mut grad = [0.0; 3];
                for k in 0..3 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[k] += d;
                    xm[k] -= d;
                    grad[k] = (phi(xp) - phi(xm)) / (2.0 * d);
                }
                let norm = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
                // phi grows outward, so the inward normal is -grad/|grad|.
                [-grad[0] / norm, -grad[1] / norm, -grad[2] / norm]
            }
        }
    }
}

/// Completes `n` (unit) to an orthonormal frame, returning two tangents.
fn tangent_frame(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // Pick the axis least aligned with n to seed the first tangent.
    let seed = if n[0].abs() <= n[1].abs() && n[0].abs() <= n[2].abs() {
        [1.0, 0.0, 0.0]
    } else if n[1].abs() <= n[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let dot = seed[0] * n[0] + seed[1] * n[1] + seed[2] * n[2];
    let mut t1 = [seed[0] - dot * n[0], seed[1] - dot * n[1], seed[2] - dot * n[2]];
    let l1 = (t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2]).sqrt();
    for c in &mut t1 {
        *c /= l1;
    }
    let t2 = [
        n[1] * t1[2] - n[2] * t1[1],
        n[2] * t1[0] - n[0] * t1[2],
        n[0] * t1[1] - n[1] * t1[0],
    ];
    (t1, t2)
}

/// Draws an emission velocity from the diffuse law at wall temperature
/// `theta`: normal speed `sqrt(theta) * Rayleigh`, tangential components
/// `sqrt(theta) * N(0,1)`. The result satisfies `w . n > 0`.
pub fn sample_diffuse<R: Rng>(n_inward: [f64; 3], theta: f64, rng: &mut R) -> [f64; 3] {
    let st = theta.sqrt();
    // Rayleigh speed via inverse CDF: P(S <= s) = 1 - exp(-s^2/2).
    let s = st * (-2.0 * uniform_open01(rng).ln()).sqrt();
    let mut normals = NormalSource::new();
    let a = st * normals.next(rng);
    let b = st * normals.next(rng);
    let (t1, t2) = tangent_frame(n_inward);
    [
        s * n_inward[0] + a * t1[0] + b * t2[0],
        s * n_inward[1] + a * t1[1] + b * t2[1],
        s * n_inward[2] + a * t1[2] + b * t2[2],
    ]
}

/// True when `v` is nearly tangent to the wall, nearly stopped, or so fast the
/// weighted estimates degrade: `|v.n| < eps`, `|v| <= eps`, or `|v| >= 1/eps`.
pub fn near_grazing(v: [f64; 3], n: [f64; 3], eps: f64) -> bool {
    let vn = (v[0] * n[0] + v[1] * n[1] + v[2] * n[2]).abs();
    let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    vn < eps || speed <= eps || speed >= 1.0 / eps
}

/// One backward time cycle: positions, exit times, segment velocities, and
/// near-grazing flags of the resampled wall velocities.
#[derive(Debug, Clone)]
pub struct BackwardCycle {
    /// `t_0 > t_1 > ... > t_k`.
    pub times: Vec<f64>,
    /// `x_0` (the start), then the boundary points `x_1 .. x_k`.
    pub points: Vec<[f64; 3]>,
    /// Segment velocities; `velocities[l]` is carried on `(t_{l+1}, t_l]`.
    pub velocities: Vec<[f64; 3]>,
    /// For each resampled velocity `v_1 .. v_k`, whether it fell in the
    /// near-grazing set.
    pub near_grazing: Vec<bool>,
}

/// Traces `k` backward reflection cycles starting from `(t0, x0, v0)`.
///
/// Each step runs the backward characteristic to the boundary, records the hit,
/// and resamples the pre-history velocity from the mirrored diffuse law at wall
/// temperature `theta`. Two consecutive zero exit times abort with
/// [`Error::DegenerateCycle`].
pub fn trace_back_time_cycle<R: Rng>(
    shape: &DomainShape,
    t0: f64,
    x0: [f64; 3],
    v0: [f64; 3],
    k: usize,
    theta: f64,
    grazing_eps: f64,
    rng: &mut R,
) -> Result<BackwardCycle> {
    let mut cycle = BackwardCycle {
        times: vec![t0],
        points: vec![x0],
        velocities: vec![v0],
        near_grazing: Vec::new(),
    };
    let mut t = t0;
    let mut x = x0;
    let mut v = v0;
    let mut last_tau_zero = false;
    for _ in 0..k {
        let tau = shape.backward_exit_time(x, v)?;
        if tau == 0.0 {
            if last_tau_zero {
                return Err(Error::DegenerateCycle { x });
            }
            last_tau_zero = true;
        } else {
            last_tau_zero = false;
        }
        t -= tau;
        let mut xb = [x[0] - v[0] * tau, x[1] - v[1] * tau, x[2] - v[2] * tau];
        if let DomainShape::Slab { length } = shape {
            // Pin the wall coordinate exactly; the marching solvers key off it.
            xb[0] = if v[0] > 0.0 { 0.0 } else { *length };
        }
        let n = shape.inward_normal(xb);
        let w = sample_diffuse(n, theta, rng);
        // Mirror: the pre-history segment must point at the wall.
        let wn = w[0] * n[0] + w[1] * n[1] + w[2] * n[2];
        let vnew = [w[0] - 2.0 * wn * n[0], w[1] - 2.0 * wn * n[1], w[2] - 2.0 * wn * n[2]];
        cycle.near_grazing.push(near_grazing(vnew, n, grazing_eps));
        cycle.times.push(t);
        cycle.points.push(xb);
        cycle.velocities.push(vnew);
        x = xb;
        v = vnew;
    }
    Ok(cycle)
}

/// Escape-probability estimate for one cycle length.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EscapePoint {
    pub k: usize,
    pub p_hat: f64,
    pub std_err: f64,
}

/// Estimates, for `k = 1 ..= k_max`, the probability that a backward cycle of
/// length `k` started at the boundary point `x0` still lies within the time
/// horizon (`t_k > t0 - horizon`).
///
/// All cycle lengths are evaluated on the same walks, so the estimates are
/// monotone in `k` by construction, exactly as the underlying probabilities
/// are.
pub fn estimate_escape_probability(
    shape: &DomainShape,
    x0: [f64; 3],
    horizon: f64,
    k_max: usize,
    n_walks: usize,
    theta: f64,
    seed: u64,
) -> Result<Vec<EscapePoint>> {
    let mut surviving = vec![0usize; k_max + 1];
    let n0 = shape.inward_normal(x0);
    for walk in 0..n_walks {
        let mut rng = substream(seed, "geometry-sampling", walk as u64);
        let w = sample_diffuse(n0, theta, &mut rng);
        let wn = w[0] * n0[0] + w[1] * n0[1] + w[2] * n0[2];
        let v0 = [w[0] - 2.0 * wn * n0[0], w[1] - 2.0 * wn * n0[1], w[2] - 2.0 * wn * n0[2]];
        let cycle = trace_back_time_cycle(shape, 0.0, x0, v0, k_max, theta, 1e-4, &mut rng)?;
        for k in 1..=k_max {
            if cycle.times[k] > -horizon {
                surviving[k] += 1;
            }
        }
    }
    Ok((1..=k_max)
        .map(|k| {
            let p = surviving[k] as f64 / n_walks as f64;
            EscapePoint {
                k,
                p_hat: p,
                std_err: (p * (1.0 - p) / n_walks as f64).sqrt(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn slab_exit_times_match_the_closed_form() {
        let slab = DomainShape::slab(2.0);
        let tau = slab.backward_exit_time([0.5, 0.0, 0.0], [2.0, 1.0, -3.0]).unwrap();
        assert_relative_eq!(tau, 0.25);
        let tau = slab.backward_exit_time([0.5, 1.0, 2.0], [-0.5, 7.0, 0.1]).unwrap();
        assert_relative_eq!(tau, 3.0);
        assert!(slab.backward_exit_time([0.5, 0.0, 0.0], [0.0, 1.0, 1.0]).is_err());
        assert_eq!(slab.inward_normal([0.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
        assert_eq!(slab.inward_normal([2.0, 5.0, -1.0]), [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn level_set_ball_exit_matches_the_chord_formula() {
        let r = 1.3;
        let ball = DomainShape::LevelSet {
            phi: Arc::new(move |x: [f64; 3]| x[0] * x[0] + x[1] * x[1] + x[2] * x[2] - r * r),
            bounding_diameter: 2.0 * r,
        };
        let cases = [
            ([0.2, -0.1, 0.4], [1.0, 0.3, -0.2]),
            ([0.0, 0.0, 0.0], [0.0, 0.0, 2.5]),
            ([-0.9, 0.3, 0.1], [-1.2, 0.8, 0.5]),
        ];
        for (x, v) in cases {
            let tau = ball.backward_exit_time(x, v).unwrap();
            // |x - v tau| = r has one positive root.
            let vv: f64 = v.iter().map(|c| c * c).sum();
            let xv: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            let xx: f64 = x.iter().map(|c| c * c).sum();
            let exact = (xv + (xv * xv + vv * (r * r - xx)).sqrt()) / vv;
            assert_relative_eq!(tau, exact, max_relative = 1e-9);
            // The normal at the hit points back toward the center.
            let xb = [x[0] - v[0] * tau, x[1] - v[1] * tau, x[2] - v[2] * tau];
            let n = ball.inward_normal(xb);
            let radial: f64 = xb.iter().zip(&n).map(|(a, b)| a * b).sum();
            assert_relative_eq!(radial, -r, max_relative = 1e-6);
        }
    }

    #[test]
    fn diffuse_samples_live_in_the_right_half_space() {
        let mut rng = substream(11, "test-diffuse", 0);
        let n = [0.6, -0.8, 0.0];
        for _ in 0..1000 {
            let w = sample_diffuse(n, 1.0, &mut rng);
            let wn = w[0] * n[0] + w[1] * n[1] + w[2] * n[2];
            assert!(wn > 0.0, "emission sample must point inward");
        }
    }

    #[test]
    fn diffuse_normal_speed_follows_the_rayleigh_law() {
        // KS test against CDF 1 - exp(-s^2 / (2 theta)) at 1% significance.
        let theta = 1.3;
        let n = [0.0, 0.0, 1.0];
        let mut rng = substream(12, "test-diffuse-ks", 0);
        let m = 200_000;
        let mut speeds: Vec<f64> = (0..m)
            .map(|_| {
                let w = sample_diffuse(n, theta, &mut rng);
                w[2]
            })
            .collect();
        let d = crate::analysis::ks_statistic(&mut speeds, |s| 1.0 - (-s * s / (2.0 * theta)).exp());
        let crit = crate::analysis::ks_critical(m, 0.01);
        assert!(d < crit, "KS statistic {d:.5} exceeds 1% critical value {crit:.5}");
        // Mean normal speed at theta = 1 is sqrt(pi/2).
        let mut rng = substream(12, "test-diffuse-mean", 0);
        let mean: f64 = (0..m)
            .map(|_| sample_diffuse(n, 1.0, &mut rng)[2])
            .sum::<f64>()
            / m as f64;
        assert_relative_eq!(mean, (std::f64::consts::PI / 2.0).sqrt(), max_relative = 5e-3);
    }

    #[test]
    fn near_grazing_covers_all_three_clauses() {
        let n = [1.0, 0.0, 0.0];
        let eps = 1e-2;
        assert!(near_grazing([1e-3, 1.0, 0.0], n, eps), "tangential");
        assert!(near_grazing([5e-3, 1e-3, 0.0], n, eps), "slow");
        assert!(near_grazing([80.0, 80.0, 0.0], n, eps), "fast");
        assert!(!near_grazing([0.5, 1.0, -0.5], n, eps), "ordinary velocity");
    }

    #[test]
    fn backward_cycles_decrease_in_time_and_alternate_walls() {
        let slab = DomainShape::slab(1.0);
        let mut rng = substream(13, "test-cycle", 0);
        let cycle =
            trace_back_time_cycle(&slab, 0.0, [0.25, 0.0, 0.0], [0.5, 0.1, 0.0], 8, 1.0, 1e-4, &mut rng)
                .unwrap();
        assert_eq!(cycle.times.len(), 9);
        assert_eq!(cycle.points.len(), 9);
        assert_eq!(cycle.velocities.len(), 9);
        assert_eq!(cycle.near_grazing.len(), 8);
        for l in 0..8 {
            assert!(cycle.times[l + 1] < cycle.times[l], "times must strictly decrease");
            let xb = cycle.points[l + 1][0];
            assert!(xb == 0.0 || xb == 1.0, "hits land exactly on a wall, got {xb}");
            // Mirrored samples point at the wall they were drawn on.
            let n = slab.inward_normal(cycle.points[l + 1]);
            let v = cycle.velocities[l + 1];
            assert!(v[0] * n[0] < 0.0, "pre-history velocity must point at the wall");
        }
    }

    #[test]
    fn escape_probability_decays_with_cycle_length() {
        let slab = DomainShape::slab(1.0);
        let pts = estimate_escape_probability(&slab, [0.0, 0.0, 0.0], 3.0, 6, 4000, 1.0, 99).unwrap();
        assert_eq!(pts.len(), 6);
        for w in pts.windows(2) {
            assert!(
                w[1].p_hat <= w[0].p_hat,
                "common-walk estimates must be monotone: {:?}",
                pts
            );
        }
        assert!(pts[0].p_hat > 0.5, "one leg usually fits in three time units");
        assert!(
            pts[5].p_hat < pts[0].p_hat - 0.05,
            "six legs decay visibly: {:?} vs {:?}",
            pts[5],
            pts[0]
        );
        // Deterministic under the same seed.
        let again = estimate_escape_probability(&slab, [0.0, 0.0, 0.0], 3.0, 6, 4000, 1.0, 99).unwrap();
        assert_eq!(pts[5].p_hat, again[5].p_hat);
    }
}
