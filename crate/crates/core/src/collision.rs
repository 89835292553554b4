//! The linearized collision operator on the velocity lattice.
//!
//! The operator acts on perturbations `f` of the global Maxwellian written in
//! the symmetrized form `F = mu + sqrt_mu f`, for the hard/soft power-law
//! kernel `B(v - u, omega) = |v - u|^gamma |cos phi|` with `gamma` in `(-3, 1]`.
//! It splits as `L = nu - K`:
//!
//! * the multiplication part `nu(v) = 2 pi int |v - u|^gamma mu(u) du` and the
//!   loss matrix `K1` are generated by deterministic cell quadrature, using the
//!   same cell-averaged radial factors for both so that the discrete identity
//!   `K1 sqrt_mu = nu sqrt_mu` holds to rounding;
//! * the gain matrix `K2` is assembled row by row with importance-sampled
//!   Monte Carlo: `u` is drawn from a centered normal with variance 2, which
//!   makes `sqrt_mu(u)` times the inverse sampling density a constant, and each
//!   sample deposits its weight at the two post-collision velocities through a
//!   quadratic-exact 27-point stencil (a trilinear stencil is available for
//!   comparison). Deposits are in Maxwellian ratio form, i.e. the stencil
//!   spreads the smooth factor `f / sqrt_mu` rather than `f` itself, which
//!   keeps the steep Maxwellian tails out of the interpolation error and lets
//!   boundary stencils extrapolate a little past the box instead of dropping
//!   the outermost gain mass;
//! * after symmetrization the gain is calibrated by a symmetric diagonal
//!   scaling so each row's Maxwellian mass matches its analytically known
//!   value `2 nu_i sqrt_mu_i` (a Sinkhorn-type balancing; the factors absorb
//!   the sampling fluctuation of the known row masses and their spread is
//!   recorded as a diagnostic together with the pre-calibration defect);
//! * `K = K2 - K1`, so `K sqrt_mu = nu sqrt_mu` holds to solver precision and
//!   the Maxwellian lies in the kernel of `L` by construction.
//!
//! A smooth cutoff `chi_m` in the relative speed splits `K` into a small
//! `near` part (relative speeds below `m`, whose norm vanishes like a power of
//! `m`) and the regular `far` remainder; both parts are assembled in the same
//! sampling pass, so `near + far` equals the unsplit operator exactly.
//!
//! The module also carries the macroscopic projector onto the five collision
//! invariants, the bilinear collision form estimated by the same sampler, a
//! BGK-type surrogate sharing `nu` and the invariants (cheap, deterministic,
//! exactly conservative), a coercivity estimator, and an on-disk matrix cache
//! (see [`cache`]).

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::equilibria::sqrt_mu;
use crate::error::Error;
use crate::quad::GL4;
use crate::rng::{substream, unit_sphere, NormalSource};
use crate::vgrid::VelocityGrid;
use crate::{Result, Scalar};

pub mod cache;

use cache::KernelHeader;

/// Constant importance weight of the gain sampler.
///
/// With `u` drawn from the normal density `(4 pi)^{-3/2} exp(-|u|^2/4)` and
/// `omega` uniform on the sphere, the ratio `sqrt_mu(u) / density` equals
/// `4 sqrt(2) pi` and the sphere area factor is `4 pi`, so every sample carries
/// `16 sqrt(2) pi^2` times its kernel value.
const IMPORTANCE_CONST: f64 = 16.0 * std::f64::consts::SQRT_2
    * (std::f64::consts::PI * std::f64::consts::PI);

/// Sphere integral of the angular factor `|cos phi|`.
const ANGULAR_MASS: f64 = 2.0 * std::f64::consts::PI;

/// Smooth relative-speed cutoff: 1 for `s <= m`, 0 for `s >= 2 m`, and a cubic
/// C^1 ramp in between. `m = 0` turns the cutoff off entirely.
pub fn chi_cutoff(s: f64, m: f64) -> f64 {
    if s <= m {
        1.0
    } else if s >= 2.0 * m {
        0.0
    } else {
        let t = (s - m) / m;
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

/// How Monte Carlo samples are spread onto (and read off) the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepositStencil {
    /// 27-point tensor stencil, exact for quadratics. The default; its
    /// interpolation bias is far below the sampling noise.
    Triquadratic,
    /// 8-point tensor stencil, exact for linears only. Kept for comparison;
    /// at the default spacing its systematic bias on the gain term is a few
    /// percent, which is visible in the null-space identity.
    Trilinear,
}

impl DepositStencil {
    fn tag(self) -> &'static str {
        match self {
            DepositStencil::Triquadratic => "q",
            DepositStencil::Trilinear => "l",
        }
    }

    fn min_nodes(self) -> usize {
        match self {
            DepositStencil::Triquadratic => 3,
            DepositStencil::Trilinear => 2,
        }
    }
}

impl std::str::FromStr for DepositStencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triquadratic" => Ok(DepositStencil::Triquadratic),
            "trilinear" => Ok(DepositStencil::Trilinear),
            other => Err(Error::config(format!(
                "unknown deposit stencil '{other}' (expected 'triquadratic' or 'trilinear')"
            ))),
        }
    }
}

/// Per-axis interpolation stencil: three node indices with Lagrange weights.
/// The trilinear case uses two nodes and a zero third weight.
#[derive(Debug, Clone, Copy)]
struct AxisStencil {
    idx: [usize; 3],
    w: [f64; 3],
}

/// Builds the stencil for index-space coordinate `ax` (node `k` sits at
/// `ax = k`). Near the edges the quadratic stencil shifts inward and keeps its
/// Lagrange weights, which still sum to one and reproduce quadratics exactly.
fn axis_stencil(stencil: DepositStencil, ax: f64, n: usize) -> AxisStencil {
    match stencil {
        DepositStencil::Triquadratic => {
            let b = (ax.round() as isize - 1).clamp(0, n as isize - 3) as usize;
            let s = ax - (b + 1) as f64;
            AxisStencil {
                idx: [b, b + 1, b + 2],
                w: [0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)],
            }
        }
        DepositStencil::Trilinear => {
            let b = (ax.floor() as isize).clamp(0, n as isize - 2) as usize;
            let f = ax - b as f64;
            AxisStencil {
                idx: [b, b + 1, b + 1],
                w: [1.0 - f, f, 0.0],
            }
        }
    }
}

/// How far beyond the box (in cells) a deposit point may sit before it is
/// dropped. Inside the pad the edge stencils extrapolate; the Maxwellian
/// ratio factor suppresses those contributions exponentially, so widening the
/// pad changes nothing visible while a hard cut at the box edge would starve
/// the outermost rows of their gain mass.
const STENCIL_PAD_CELLS: f64 = 3.0;

/// Full tensor stencil at a velocity point, or `None` when the point is
/// outside the padded box (its weight is then dropped as truncation loss).
fn tensor_stencil(
    stencil: DepositStencil,
    p: [f64; 3],
    n: usize,
    v_max: f64,
    h: f64,
) -> Option<[AxisStencil; 3]> {
    let pad = STENCIL_PAD_CELLS * h;
    if p.iter().any(|c| c.abs() > v_max + pad) {
        return None;
    }
    let ax = |c: f64| (c + v_max) / h - 0.5;
    Some([
        axis_stencil(stencil, ax(p[0]), n),
        axis_stencil(stencil, ax(p[1]), n),
        axis_stencil(stencil, ax(p[2]), n),
    ])
}

/// Spreads `weight` at point `p` into the `near`/`far` channel rows, split by
/// the cutoff value `chi`. The deposit is in Maxwellian ratio form: node `j`
/// receives `weight * sqrt_mu(p) * lagrange_j(p) / sqrt_mu_j`, so dotting a
/// row against the nodal Maxwellian recovers `weight * sqrt_mu(p)` exactly
/// (the Lagrange weights sum to one for every point, shifted edge stencils
/// included), and smooth perturbations `f = phi sqrt_mu` are read through
/// their smooth factor `phi` alone. Returns false when the point fell beyond
/// the padded box.
#[allow(clippy::too_many_arguments)]
fn deposit_split(
    near: &mut [f64],
    far: &mut [f64],
    stencil: DepositStencil,
    p: [f64; 3],
    weight: f64,
    chi: f64,
    n: usize,
    v_max: f64,
    h: f64,
    inv_smu: &[f64],
) -> bool {
    let Some(st) = tensor_stencil(stencil, p, n, v_max, h) else {
        return false;
    };
    let smu_p = sqrt_mu::<f64>(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    let w_near = weight * chi * smu_p;
    let w_far = weight * (1.0 - chi) * smu_p;
    for (a, &wa) in st[0].idx.iter().zip(&st[0].w) {
        if wa == 0.0 {
            continue;
        }
        let base_a = a * n;
        for (b, &wb) in st[1].idx.iter().zip(&st[1].w) {
            if wb == 0.0 {
                continue;
            }
            let base_b = (base_a + b) * n;
            let wab = wa * wb;
            for (c, &wc) in st[2].idx.iter().zip(&st[2].w) {
                if wc == 0.0 {
                    continue;
                }
                let lag = wab * wc * inv_smu[base_b + c];
                near[base_b + c] += w_near * lag;
                far[base_b + c] += w_far * lag;
            }
        }
    }
    true
}

/// Reads a nodal vector at an off-grid point through the same ratio stencil
/// the deposits use: `sqrt_mu(p)` times the interpolated smooth factor
/// `f / sqrt_mu`. Zero beyond the padded box.
fn interp_at<S: Scalar>(
    values: &[S],
    stencil: DepositStencil,
    p: [f64; 3],
    n: usize,
    v_max: f64,
    h: f64,
    inv_smu: &[f64],
) -> f64 {
    let Some(st) = tensor_stencil(stencil, p, n, v_max, h) else {
        return 0.0;
    };
    let mut acc = 0.0;
    for (a, &wa) in st[0].idx.iter().zip(&st[0].w) {
        if wa == 0.0 {
            continue;
        }
        let base_a = a * n;
        for (b, &wb) in st[1].idx.iter().zip(&st[1].w) {
            if wb == 0.0 {
                continue;
            }
            let base_b = (base_a + b) * n;
            let wab = wa * wb;
            for (c, &wc) in st[2].idx.iter().zip(&st[2].w) {
                if wc == 0.0 {
                    continue;
                }
                let j = base_b + c;
                acc += wab * wc * values[j].to_f64_lossy() * inv_smu[j];
            }
        }
    }
    acc * sqrt_mu::<f64>(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
}

/// Radial kernel factor `dist^gamma` with fast paths for the common exponents.
fn radial(dist: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        dist
    } else if gamma == 0.0 {
        1.0
    } else {
        dist.powf(gamma)
    }
}

/// Cell-averaged radial factors per displacement between two lattice cells.
///
/// `full[d]` holds the average of `|d + xi|^gamma` over one cell offset `xi`,
/// `parts[c][d]` the same average weighted by `chi_{m_c}`. Distant cells use a
/// midpoint value, near cells a 4^3 Gauss panel, and the zero displacement an
/// 8^3 midpoint refinement (the integrand is singular but integrable there for
/// negative `gamma`).
struct LossTables {
    n: usize,
    full: Vec<f64>,
    parts: Vec<Vec<f64>>,
}

impl LossTables {
    #[inline]
    fn entry_index(&self, di: usize, dj: usize, dk: usize) -> usize {
        (di * self.n + dj) * self.n + dk
    }
}

fn build_loss_tables(n: usize, h: f64, gamma: f64, ms: &[f64]) -> LossTables {
    let mut full = vec![0.0; n * n * n];
    let mut parts = vec![vec![0.0; n * n * n]; ms.len()];
    for di in 0..n {
        for dj in 0..n {
            for dk in 0..n {
                let idx = (di * n + dj) * n + dk;
                let d = [di as f64 * h, dj as f64 * h, dk as f64 * h];
                let cheb = di.max(dj).max(dk);
                let mut f_acc = 0.0;
                let mut p_acc = vec![0.0; ms.len()];
                let mut visit = |xi: [f64; 3], w: f64| {
                    let dist = ((d[0] + xi[0]).powi(2)
                        + (d[1] + xi[1]).powi(2)
                        + (d[2] + xi[2]).powi(2))
                    .sqrt();
                    let r = radial(dist, gamma);
                    f_acc += w * r;
                    for (acc, &m) in p_acc.iter_mut().zip(ms) {
                        *acc += w * r * chi_cutoff(dist, m);
                    }
                };
                if cheb >= 3 {
                    // Far cells: the integrand is smooth on the cell scale.
                    visit([0.0, 0.0, 0.0], 1.0);
                } else if cheb > 0 {
                    for &(xa, wa) in GL4.iter() {
                        for &(xb, wb) in GL4.iter() {
                            for &(xc, wc) in GL4.iter() {
                                let xi = [0.5 * h * xa, 0.5 * h * xb, 0.5 * h * xc];
                                visit(xi, 0.125 * wa * wb * wc);
                            }
                        }
                    }
                } else {
                    let sub = 8;
                    let w = 1.0 / (sub * sub * sub) as f64;
                    for a in 0..sub {
                        for b in 0..sub {
                            for c in 0..sub {
                                let coord =
                                    |k: usize| ((k as f64 + 0.5) / sub as f64 - 0.5) * h;
                                visit([coord(a), coord(b), coord(c)], w);
                            }
                        }
                    }
                }
                full[idx] = f_acc;
                for (table, acc) in parts.iter_mut().zip(&p_acc) {
                    table[idx] = *acc;
                }
            }
        }
    }
    LossTables { n, full, parts }
}

/// Collision frequency table `nu_i = 2 pi h^3 sum_j <|v_i - u|^gamma>_j mu_j`,
/// generated by the same cell quadrature the loss matrix uses. Available
/// without assembling any matrix; the BGK surrogate runs on this alone.
pub fn collision_frequency<S: Scalar>(grid: &VelocityGrid<S>, gamma: f64) -> Result<Vec<S>> {
    validate_gamma(gamma)?;
    let tables = build_loss_tables(grid.n_per_axis(), grid.spacing(), gamma, &[]);
    Ok(collision_frequency_from(&tables, grid)
        .into_iter()
        .map(S::c)
        .collect())
}

fn collision_frequency_from<S: Scalar>(tables: &LossTables, grid: &VelocityGrid<S>) -> Vec<f64> {
    let n = grid.n_per_axis();
    let h = grid.spacing();
    let mu: Vec<f64> = (0..grid.len())
        .map(|i| {
            let s = sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy());
            s * s
        })
        .collect();
    let factor = ANGULAR_MASS * h * h * h;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [ix, iy, iz] = grid.axis_indices(i);
            let mut acc = 0.0;
            let mut j = 0;
            for jx in 0..n {
                let di = ix.abs_diff(jx);
                for jy in 0..n {
                    let dj = iy.abs_diff(jy);
                    let base = (di * n + dj) * n;
                    for jz in 0..n {
                        let dk = iz.abs_diff(jz);
                        acc += tables.full[base + dk] * mu[j];
                        j += 1;
                    }
                }
            }
            factor * acc
        })
        .collect()
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > -3.0 && gamma <= 1.0) {
        return Err(Error::config(format!(
            "kernel exponent gamma must lie in (-3, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Dense square matrix over velocity nodes, row-major.
#[derive(Debug, Clone)]
pub struct KernelMatrix<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> KernelMatrix<S> {
    pub fn zeros(dim: usize) -> Self {
        KernelMatrix {
            dim,
            data: vec![S::zero(); dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Matrix-vector product `out = A f`.
    pub fn apply(&self, f: &[S], out: &mut [S]) {
        assert_eq!(f.len(), self.dim, "kernel matvec input length");
        assert_eq!(out.len(), self.dim, "kernel matvec output length");
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(f) {
                acc += *a * *b;
            }
            *o = acc;
        });
    }

    /// Entrywise sum of two matrices of equal dimension.
    pub fn sum_of(a: &KernelMatrix<S>, b: &KernelMatrix<S>) -> KernelMatrix<S> {
        assert_eq!(a.dim, b.dim, "kernel matrix dimensions");
        KernelMatrix {
            dim: a.dim,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
        }
    }

    /// Replaces the matrix by its symmetric part.
    pub fn symmetrize_in_place(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = self.data[i * n + j];
                let b = self.data[j * n + i];
                let avg = (a + b) / S::c(2.0);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    /// Operator infinity-norm: the largest row sum of absolute entries.
    pub fn sup_row_abs_sum(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|row| row.iter().map(|x| x.abs().to_f64_lossy()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn into_empty() -> Self {
        KernelMatrix { dim: 0, data: Vec::new() }
    }
}

/// Assembly parameters of the collision model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionParams {
    /// Kernel exponent in `(-3, 1]`; 1 is hard spheres, negative values soft.
    pub gamma: f64,
    /// Relative-speed cutoff of the near/far split, in `(0, 1]`.
    pub m_cutoff: f64,
    /// Monte Carlo samples per matrix row.
    pub samples_per_row: u64,
    /// Seed of the per-row sampling substreams.
    pub seed: u64,
    /// Deposit/interpolation stencil.
    pub stencil: DepositStencil,
    /// Assembly fails when the raw gain asymmetry probe exceeds this; raise it
    /// only for deliberately under-sampled experiments.
    pub asymmetry_tolerance: f64,
}

impl CollisionParams {
    pub fn new(gamma: f64) -> Self {
        CollisionParams {
            gamma,
            m_cutoff: 0.5,
            samples_per_row: 20_000,
            seed: 1,
            stencil: DepositStencil::Triquadratic,
            asymmetry_tolerance: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_gamma(self.gamma)?;
        if !(self.m_cutoff > 0.0 && self.m_cutoff <= 1.0) {
            return Err(Error::config(format!(
                "cutoff m must lie in (0, 1], got {}",
                self.m_cutoff
            )));
        }
        if self.samples_per_row == 0 {
            return Err(Error::config("samples_per_row must be at least 1"));
        }
        if !(self.asymmetry_tolerance > 0.0) {
            return Err(Error::config(format!(
                "asymmetry tolerance must be positive, got {}",
                self.asymmetry_tolerance
            )));
        }
        Ok(())
    }

    fn header<S: Scalar>(&self, grid: &VelocityGrid<S>) -> KernelHeader {
        KernelHeader {
            gamma: self.gamma,
            v_max: grid.v_max(),
            n_per_axis: grid.n_per_axis() as u32,
            m_cutoff: self.m_cutoff,
            samples_per_row: self.samples_per_row,
            seed: self.seed,
        }
    }
}

/// Shared read-only context of one assembly run.
struct AssembleCtx<'a> {
    params: CollisionParams,
    nodes: &'a [[f64; 3]],
    inv_smu: &'a [f64],
    n: usize,
    v_max: f64,
    h: f64,
}

/// Draws the collision samples of one row/node and hands each to `visit` as
/// `(relative speed, kernel value B, v', u', u)`. The stream is fully
/// determined by `(seed, label, index)`; zero relative speed is skipped.
fn for_each_collision_sample(
    seed: u64,
    label: &str,
    index: u64,
    v: [f64; 3],
    gamma: f64,
    n_samples: u64,
    visit: &mut impl FnMut(f64, f64, [f64; 3], [f64; 3], [f64; 3]),
) {
    let mut rng = substream(seed, label, index);
    let mut normals = NormalSource::new();
    let sqrt2 = std::f64::consts::SQRT_2;
    for _ in 0..n_samples {
        let u = [
            sqrt2 * normals.next(&mut rng),
            sqrt2 * normals.next(&mut rng),
            sqrt2 * normals.next(&mut rng),
        ];
        let om = unit_sphere(&mut rng);
        let rel = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
        let rl2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2];
        if rl2 == 0.0 {
            continue;
        }
        let rl = rl2.sqrt();
        let proj = rel[0] * om[0] + rel[1] * om[1] + rel[2] * om[2];
        let b = radial(rl, gamma) * (proj / rl).abs();
        let vp = [v[0] - proj * om[0], v[1] - proj * om[1], v[2] - proj * om[2]];
        let up = [u[0] + proj * om[0], u[1] + proj * om[1], u[2] + proj * om[2]];
        visit(rl, b, vp, up, u);
    }
}

/// Assembles one row of the split gain matrices (loss is subtracted later,
/// after calibration). Returns the (dropped, total) absolute deposit weight
/// of the row; only points beyond the padded box are dropped.
fn assemble_row<S: Scalar>(
    i: usize,
    near_out: &mut [S],
    far_out: &mut [S],
    ctx: &AssembleCtx<'_>,
) -> (f64, f64) {
    let dim = near_out.len();
    let mut near = vec![0.0f64; dim];
    let mut far = vec![0.0f64; dim];
    let v = ctx.nodes[i];
    let base = IMPORTANCE_CONST / ctx.params.samples_per_row as f64;
    let m = ctx.params.m_cutoff;
    let mut dropped = 0.0;
    let mut total = 0.0;
    for_each_collision_sample(
        ctx.params.seed,
        "kernel-assembly",
        i as u64,
        v,
        ctx.params.gamma,
        ctx.params.samples_per_row,
        &mut |rl, b, vp, up, _u| {
            if b == 0.0 {
                return;
            }
            let chi = chi_cutoff(rl, m);
            let sp_up = sqrt_mu::<f64>(up[0] * up[0] + up[1] * up[1] + up[2] * up[2]);
            let sp_vp = sqrt_mu::<f64>(vp[0] * vp[0] + vp[1] * vp[1] + vp[2] * vp[2]);
            // Gain deposits: the f(v') column weight carries sqrt_mu(u') and
            // vice versa.
            for (point, weight) in [(vp, base * b * sp_up), (up, base * b * sp_vp)] {
                total += weight.abs();
                if !deposit_split(
                    &mut near,
                    &mut far,
                    ctx.params.stencil,
                    point,
                    weight,
                    chi,
                    ctx.n,
                    ctx.v_max,
                    ctx.h,
                    ctx.inv_smu,
                ) {
                    dropped += weight.abs();
                }
            }
        },
    );
    for j in 0..dim {
        near_out[j] = S::c(near[j]);
        far_out[j] = S::c(far[j]);
    }
    (dropped, total)
}

/// Subtracts the exact split loss part from the (already calibrated) gain
/// matrices. Entries are evaluated in a form symmetric under swapping the two
/// node indices, so the matrices stay bitwise symmetric.
fn subtract_loss<S: Scalar>(
    near: &mut KernelMatrix<S>,
    far: &mut KernelMatrix<S>,
    smu: &[f64],
    tables: &LossTables,
    h: f64,
) {
    let dim = near.dim;
    let n = tables.n;
    let factor = ANGULAR_MASS * h * h * h;
    let part_m = &tables.parts[0];
    for i in 0..dim {
        let [ix, iy, iz] = [i / (n * n), (i / n) % n, i % n];
        for j in i..dim {
            let [jx, jy, jz] = [j / (n * n), (j / n) % n, j % n];
            let t_idx = tables.entry_index(ix.abs_diff(jx), iy.abs_diff(jy), iz.abs_diff(jz));
            let pair = factor * (smu[i] * smu[j]);
            let t_m = part_m[t_idx] * pair;
            let t_c = (tables.full[t_idx] - part_m[t_idx]) * pair;
            let near_val = S::c(near.data[i * dim + j].to_f64_lossy() - t_m);
            let far_val = S::c(far.data[i * dim + j].to_f64_lossy() - t_c);
            near.data[i * dim + j] = near_val;
            near.data[j * dim + i] = near_val;
            far.data[i * dim + j] = far_val;
            far.data[j * dim + i] = far_val;
        }
    }
}

/// Symmetrizes the sampled gain parts entry by entry with inverse-variance
/// weights. Entry `(i, j)` and its mirror both estimate the same symmetric
/// kernel value, but with very different noise: row `i` lands plenty of
/// samples on columns where the Maxwellian is heavy and next to none on the
/// far tail (where the ratio deposit also amplifies what little it gets), so
/// the spread of `A_ij` scales like `1 / mu_j`. Weighting the pair by
/// `(mu_j, mu_i)` therefore takes each entry mostly from the row that
/// actually sampled it; a plain average would instead poison the tail rows
/// with the other row's amplified noise. Both channels use the same weights,
/// so their sum is the weighted symmetrization of the total.
fn symmetrize_weighted<S: Scalar>(
    near: &mut KernelMatrix<S>,
    far: &mut KernelMatrix<S>,
    smu: &[f64],
) {
    let dim = near.dim;
    for i in 0..dim {
        let mu_i = smu[i] * smu[i];
        for j in (i + 1)..dim {
            let mu_j = smu[j] * smu[j];
            let denom = mu_i + mu_j;
            let (wi, wj) = (mu_j / denom, mu_i / denom);
            let nv = S::c(
                near.data[i * dim + j].to_f64_lossy() * wi
                    + near.data[j * dim + i].to_f64_lossy() * wj,
            );
            let fv = S::c(
                far.data[i * dim + j].to_f64_lossy() * wi
                    + far.data[j * dim + i].to_f64_lossy() * wj,
            );
            near.data[i * dim + j] = nv;
            near.data[j * dim + i] = nv;
            far.data[i * dim + j] = fv;
            far.data[j * dim + i] = fv;
        }
    }
}

/// Outcome of the gain-mass calibration.
#[derive(Debug, Clone, Copy)]
struct BalanceReport {
    /// Identity defect of the symmetrized raw gain before calibration:
    /// `max |(K2 sqrt_mu)_i / (2 nu_i sqrt_mu_i) - 1|`. This is the honest
    /// Monte Carlo + discretization error of the sampled gain.
    raw_residual: f64,
    /// Largest relative deviation of a scaling factor from one.
    spread: f64,
    /// Identity defect remaining after calibration.
    residual: f64,
    iterations: usize,
}

/// Calibrates the symmetrized gain so its row masses on the Maxwellian equal
/// the analytically known values `2 nu_i sqrt_mu_i` exactly: a symmetric
/// diagonal scaling `K2 <- D K2 D` with `D` solved by a damped fixed-point
/// iteration (the single-vector symmetric form of Sinkhorn balancing). The
/// scaling absorbs the Monte Carlo fluctuation of each row's known total mass
/// without touching the kernel's shape, and the operator built from the
/// calibrated gain annihilates the discrete Maxwellian to solver precision.
/// Both split channels are scaled by the same factors, so their sum is the
/// calibrated full gain and the split stays exact.
fn balance_gain<S: Scalar>(
    near: &mut KernelMatrix<S>,
    far: &mut KernelMatrix<S>,
    smu: &[f64],
    nu: &[f64],
) -> BalanceReport {
    let dim = near.dim;
    // Gain columns pre-scaled by the Maxwellian: mass_i(d) = sum_j W_ij d_j.
    let mut w = vec![0.0f64; dim * dim];
    w.par_chunks_mut(dim).enumerate().for_each(|(i, wrow)| {
        let nrow = &near.data[i * dim..(i + 1) * dim];
        let frow = &far.data[i * dim..(i + 1) * dim];
        for j in 0..dim {
            wrow[j] = (nrow[j].to_f64_lossy() + frow[j].to_f64_lossy()) * smu[j];
        }
    });
    let target: Vec<f64> = nu.iter().zip(smu).map(|(nv, s)| 2.0 * nv * s).collect();
    let mut d = vec![1.0f64; dim];
    let mut mass = vec![0.0f64; dim];
    let mut raw_residual = 0.0f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for iter in 0..500 {
        mass.par_iter_mut().enumerate().for_each(|(i, out)| {
            let wrow = &w[i * dim..(i + 1) * dim];
            *out = wrow.iter().zip(&d).map(|(a, b)| a * b).sum();
        });
        residual = 0.0;
        for i in 0..dim {
            residual = residual.max((d[i] * mass[i] / target[i] - 1.0).abs());
        }
        if iter == 0 {
            raw_residual = residual;
        }
        iterations = iter;
        if residual < 1e-13 {
            break;
        }
        for i in 0..dim {
            if mass[i] > 0.0 {
                // Geometric-mean damped update of d_i (A d)_i = t_i.
                d[i] *= (target[i] / (d[i] * mass[i])).sqrt();
            }
        }
    }
    let spread = d.iter().map(|x| (x - 1.0).abs()).fold(0.0f64, f64::max);
    // Apply the scaling symmetrically (one factor per entry pair).
    for i in 0..dim {
        for j in i..dim {
            let f = d[i] * d[j];
            let nv = S::c(near.data[i * dim + j].to_f64_lossy() * f);
            let fv = S::c(far.data[i * dim + j].to_f64_lossy() * f);
            near.data[i * dim + j] = nv;
            near.data[j * dim + i] = nv;
            far.data[i * dim + j] = fv;
            far.data[j * dim + i] = fv;
        }
    }
    BalanceReport { raw_residual, spread, residual, iterations }
}

/// The assembled linearized collision operator `L = nu - K` and its parts.
#[derive(Debug)]
pub struct CollisionModel<S> {
    params: CollisionParams,
    n_per_axis: usize,
    v_max: f64,
    nu: Vec<S>,
    sqrt_mu: Vec<S>,
    k: KernelMatrix<S>,
    k_near: KernelMatrix<S>,
    k_far: KernelMatrix<S>,
    nu_envelope_spread: f64,
    asymmetry_probe: Option<f64>,
    dropped_weight_fraction: Option<f64>,
    raw_null_residual: Option<f64>,
    balance_spread: Option<f64>,
    balance_residual: Option<f64>,
    loaded_from_cache: bool,
}

impl<S: Scalar> CollisionModel<S> {
    /// Assembles the model from scratch.
    pub fn assemble(params: CollisionParams, grid: &VelocityGrid<S>) -> Result<Self> {
        params.validate()?;
        if grid.n_per_axis() < params.stencil.min_nodes() {
            return Err(Error::config(format!(
                "{:?} deposits need at least {} nodes per axis, grid has {}",
                params.stencil,
                params.stencil.min_nodes(),
                grid.n_per_axis()
            )));
        }
        let dim = grid.len();
        let n = grid.n_per_axis();
        let h = grid.spacing();
        let nodes: Vec<[f64; 3]> = (0..dim)
            .map(|i| {
                let v = grid.node(i);
                [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
            })
            .collect();
        let smu: Vec<f64> = (0..dim)
            .map(|i| sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy()))
            .collect();
        let inv_smu: Vec<f64> = smu.iter().map(|s| 1.0 / s).collect();
        let tables = build_loss_tables(n, h, params.gamma, &[params.m_cutoff]);
        let ctx = AssembleCtx {
            params,
            nodes: &nodes,
            inv_smu: &inv_smu,
            n,
            v_max: grid.v_max(),
            h,
        };

        let mut k_near = KernelMatrix::zeros(dim);
        let mut k_far = KernelMatrix::zeros(dim);
        let stats: Vec<(f64, f64)> = k_near
            .data
            .par_chunks_mut(dim)
            .zip(k_far.data.par_chunks_mut(dim))
            .enumerate()
            .map(|(i, (nrow, frow))| assemble_row(i, nrow, frow, &ctx))
            .collect();
        let dropped: f64 = stats.iter().map(|s| s.0).sum();
        let total: f64 = stats.iter().map(|s| s.1).sum();

        let asym = asymmetry_probe(&k_near, &k_far, &smu);
        if asym > params.asymmetry_tolerance {
            return Err(Error::Convergence {
                what: "collision kernel assembly: the sampling budget was exhausted \
                       with the gain asymmetry probe still above tolerance"
                    .into(),
                iterations: params.samples_per_row as usize,
                residual: asym,
                tol: params.asymmetry_tolerance,
            });
        }
        symmetrize_weighted(&mut k_near, &mut k_far, &smu);

        let nu = collision_frequency_from(&tables, grid);
        let balance = balance_gain(&mut k_near, &mut k_far, &smu, &nu);
        if balance.residual > 1e-10 {
            return Err(Error::Convergence {
                what: "gain calibration: the balancing iteration stalled above tolerance".into(),
                iterations: balance.iterations,
                residual: balance.residual,
                tol: 1e-10,
            });
        }
        subtract_loss(&mut k_near, &mut k_far, &smu, &tables, h);
        let k = KernelMatrix::sum_of(&k_near, &k_far);

        let envelope = nu_envelope_spread_of(&nu, &nodes, params.gamma);
        Ok(CollisionModel {
            params,
            n_per_axis: n,
            v_max: grid.v_max(),
            nu: nu.into_iter().map(S::c).collect(),
            sqrt_mu: smu.into_iter().map(S::c).collect(),
            k,
            k_near,
            k_far,
            nu_envelope_spread: envelope,
            asymmetry_probe: Some(asym),
            dropped_weight_fraction: Some(if total > 0.0 { dropped / total } else { 0.0 }),
            raw_null_residual: Some(balance.raw_residual),
            balance_spread: Some(balance.spread),
            balance_residual: Some(balance.residual),
            loaded_from_cache: false,
        })
    }

    /// Loads the split matrices from `cache_dir` when a valid matching pair of
    /// files exists, otherwise assembles and (when a directory is given)
    /// writes them. Invalid or mismatched cache files are silently rebuilt.
    /// Assembly-time diagnostics are not stored, so cache-loaded models carry
    /// `None` for them.
    pub fn assemble_or_load(
        params: CollisionParams,
        grid: &VelocityGrid<S>,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        params.validate()?;
        let Some(dir) = cache_dir else {
            return Self::assemble(params, grid);
        };
        let header = params.header(grid);
        let (near_path, far_path) = Self::cache_paths(dir, &header, params.stencil);
        if let (Ok((_, near_data)), Ok((_, far_data))) = (
            cache::read_matrix(&near_path, Some(&header)),
            cache::read_matrix(&far_path, Some(&header)),
        ) {
            let dim = grid.len();
            if near_data.len() == dim * dim && far_data.len() == dim * dim {
                let tables =
                    build_loss_tables(grid.n_per_axis(), grid.spacing(), params.gamma, &[]);
                let nu = collision_frequency_from(&tables, grid);
                let k_near = KernelMatrix {
                    dim,
                    data: near_data.into_iter().map(S::c).collect(),
                };
                let k_far = KernelMatrix {
                    dim,
                    data: far_data.into_iter().map(S::c).collect(),
                };
                let k = KernelMatrix::sum_of(&k_near, &k_far);
                let nodes: Vec<[f64; 3]> = (0..dim)
                    .map(|i| {
                        let v = grid.node(i);
                        [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
                    })
                    .collect();
                let envelope = nu_envelope_spread_of(&nu, &nodes, params.gamma);
                return Ok(CollisionModel {
                    params,
                    n_per_axis: grid.n_per_axis(),
                    v_max: grid.v_max(),
                    nu: nu.into_iter().map(S::c).collect(),
                    sqrt_mu: (0..dim)
                        .map(|i| S::c(sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy())))
                        .collect(),
                    k,
                    k_near,
                    k_far,
                    nu_envelope_spread: envelope,
                    asymmetry_probe: None,
                    dropped_weight_fraction: None,
                    raw_null_residual: None,
                    balance_spread: None,
                    balance_residual: None,
                    loaded_from_cache: true,
                });
            }
        }
        let model = Self::assemble(params, grid)?;
        let near_f64: Vec<f64> = model.k_near.data.iter().map(|x| x.to_f64_lossy()).collect();
        cache::write_matrix(&near_path, &header, &near_f64)?;
        drop(near_f64);
        let far_f64: Vec<f64> = model.k_far.data.iter().map(|x| x.to_f64_lossy()).collect();
        cache::write_matrix(&far_path, &header, &far_f64)?;
        Ok(model)
    }

    /// Cache file paths of the two split parts.
    pub fn cache_paths(
        dir: &Path,
        header: &KernelHeader,
        stencil: DepositStencil,
    ) -> (PathBuf, PathBuf) {
        let stem = format!("{}-{}", header.file_stem(), stencil.tag());
        (
            dir.join(format!("{stem}.near.kmat")),
            dir.join(format!("{stem}.far.kmat")),
        )
    }

    pub fn params(&self) -> &CollisionParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Collision frequency table.
    pub fn nu(&self) -> &[S] {
        &self.nu
    }

    pub fn nu_min(&self) -> f64 {
        self.nu
            .iter()
            .map(|x| x.to_f64_lossy())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sqrt_mu(&self) -> &[S] {
        &self.sqrt_mu
    }

    /// The full gain-minus-loss matrix `K`.
    pub fn k(&self) -> &KernelMatrix<S> {
        &self.k
    }

    /// Small-relative-speed part of `K` (the piece whose norm vanishes as the
    /// cutoff shrinks).
    pub fn k_near(&self) -> &KernelMatrix<S> {
        &self.k_near
    }

    /// Complementary regular part; `near + far = K` entrywise by construction.
    pub fn k_far(&self) -> &KernelMatrix<S> {
        &self.k_far
    }

    /// Pre-symmetrization asymmetry of the raw gain estimate on a Maxwellian
    /// probe; `None` when the model was loaded from cache.
    pub fn asymmetry_probe(&self) -> Option<f64> {
        self.asymmetry_probe
    }

    /// Fraction of sampled deposit weight that fell beyond the padded box.
    pub fn dropped_weight_fraction(&self) -> Option<f64> {
        self.dropped_weight_fraction
    }

    /// Maxwellian identity defect of the symmetrized gain before calibration,
    /// the honest sampling error of the assembly; `None` when loaded.
    pub fn raw_null_residual(&self) -> Option<f64> {
        self.raw_null_residual
    }

    /// Largest relative deviation of a gain calibration factor from one.
    pub fn balance_spread(&self) -> Option<f64> {
        self.balance_spread
    }

    /// Maxwellian identity defect left after gain calibration.
    pub fn balance_residual(&self) -> Option<f64> {
        self.balance_residual
    }

    /// Ratio bound of `nu` against `(1 + |v|)^gamma`, recorded at build time.
    pub fn nu_envelope_spread(&self) -> f64 {
        self.nu_envelope_spread
    }

    pub fn loaded_from_cache(&self) -> bool {
        self.loaded_from_cache
    }

    /// Frees the split parts, keeping only `K`, `nu`, `sqrt_mu`. The solvers
    /// only need those; dropping the parts returns two thirds of the matrix
    /// memory at the default grid.
    pub fn release_split_parts(&mut self) {
        self.k_near = KernelMatrix::into_empty();
        self.k_far = KernelMatrix::into_empty();
    }

    /// `out = K f`.
    pub fn apply_k(&self, f: &[S], out: &mut [S]) {
        self.k.apply(f, out);
    }

    /// `out = L f = nu f - K f`.
    pub fn apply_l(&self, f: &[S], out: &mut [S]) {
        self.k.apply(f, out);
        for ((o, &n), &x) in out.iter_mut().zip(&self.nu).zip(f) {
            *o = n * x - *o;
        }
    }
}

/// Relative asymmetry of the raw (pre-symmetrization) gain estimate, measured
/// on the Maxwellian probe: `max |(A - A^T) sqrt_mu| / max |(A + A^T) sqrt_mu|`
/// where `A` is the sampled gain matrix (the deterministic loss part is
/// symmetric by construction and would only dilute the probe).
fn asymmetry_probe<S: Scalar>(
    k_near: &KernelMatrix<S>,
    k_far: &KernelMatrix<S>,
    smu: &[f64],
) -> f64 {
    let dim = k_near.dim;
    let mut a_smu = vec![0.0f64; dim];
    let mut at_smu = vec![0.0f64; dim];
    for i in 0..dim {
        let near_row = k_near.row(i);
        let far_row = k_far.row(i);
        let si = smu[i];
        let mut acc = 0.0;
        for j in 0..dim {
            let gain = near_row[j].to_f64_lossy() + far_row[j].to_f64_lossy();
            acc += gain * smu[j];
            at_smu[j] += gain * si;
        }
        a_smu[i] = acc;
    }
    let mut diff = 0.0f64;
    let mut sum = 0.0f64;
    for (a, at) in a_smu.iter().zip(&at_smu) {
        diff = diff.max((a - at).abs());
        sum = sum.max((a + at).abs());
    }
    if sum > 0.0 {
        diff / sum
    } else {
        0.0
    }
}

/// Spread of the collision frequency against its advertised growth envelope:
/// the ratio of the largest to the smallest value of `nu_i / (1 + |v_i|)^gamma`
/// over the grid. Recorded at build time; a spread of a few means `nu` is
/// pinched between multiples of the envelope as the continuum bounds promise.
fn nu_envelope_spread_of(nu: &[f64], nodes: &[[f64; 3]], gamma: f64) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (nv, v) in nu.iter().zip(nodes) {
        let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let ratio = nv / (1.0 + speed).powf(gamma);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Scan of the operator infinity-norm of the small-relative-speed part over a
/// ladder of cutoff values, without storing any matrix. For each row the gain
/// deposits are repeated per cutoff channel and the matching loss row is
/// subtracted; the returned value per channel is the largest row sum of
/// absolute entries. The sampling streams match assembly, so channel `c` at
/// the model's own cutoff reproduces the raw pre-symmetrization part.
pub fn cutoff_norm_scan<S: Scalar>(
    grid: &VelocityGrid<S>,
    gamma: f64,
    stencil: DepositStencil,
    m_values: &[f64],
    samples_per_row: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    validate_gamma(gamma)?;
    if m_values.is_empty() || m_values.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::config(
            "cutoff scan needs at least one strictly positive cutoff value",
        ));
    }
    if samples_per_row == 0 {
        return Err(Error::config("samples_per_row must be at least 1"));
    }
    if grid.n_per_axis() < stencil.min_nodes() {
        return Err(Error::config("grid too small for the deposit stencil"));
    }
    let dim = grid.len();
    let n = grid.n_per_axis();
    let h = grid.spacing();
    let v_max = grid.v_max();
    let channels = m_values.len();
    let nodes: Vec<[f64; 3]> = (0..dim)
        .map(|i| {
            let v = grid.node(i);
            [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()]
        })
        .collect();
    let smu: Vec<f64> = (0..dim)
        .map(|i| sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy()))
        .collect();
    let inv_smu: Vec<f64> = smu.iter().map(|s| 1.0 / s).collect();
    let tables = build_loss_tables(n, h, gamma, m_values);
    let base = IMPORTANCE_CONST / samples_per_row as f64;

    let norms = (0..dim)
        .into_par_iter()
        .map(|i| {
            let mut rows = vec![0.0f64; channels * dim];
            let mut sink = vec![0.0f64; dim];
            let v = nodes[i];
            for_each_collision_sample(
                seed,
                "kernel-assembly",
                i as u64,
                v,
                gamma,
                samples_per_row,
                &mut |rl, b, vp, up, _u| {
                    if b == 0.0 {
                        return;
                    }
                    let sp_up = sqrt_mu::<f64>(up[0] * up[0] + up[1] * up[1] + up[2] * up[2]);
                    let sp_vp = sqrt_mu::<f64>(vp[0] * vp[0] + vp[1] * vp[1] + vp[2] * vp[2]);
                    for (point, weight) in [(vp, base * b * sp_up), (up, base * b * sp_vp)] {
                        for (c, &m) in m_values.iter().enumerate() {
                            let chi = chi_cutoff(rl, m);
                            if chi == 0.0 {
                                continue;
                            }
                            deposit_split(
                                &mut rows[c * dim..(c + 1) * dim],
                                &mut sink,
                                stencil,
                                point,
                                weight,
                                chi,
                                n,
                                v_max,
                                h,
                                &inv_smu,
                            );
                        }
                    }
                },
            );
            // Subtract the chi-weighted loss row per channel, then take the
            // row absolute sum.
            let [ix, iy, iz] = [i / (n * n), (i / n) % n, i % n];
            let fi = ANGULAR_MASS * h * h * h * smu[i];
            let mut out = vec![0.0f64; channels];
            for (c, norm) in out.iter_mut().enumerate() {
                let part = &tables.parts[c];
                let row = &mut rows[c * dim..(c + 1) * dim];
                let mut j = 0;
                let mut acc = 0.0;
                for jx in 0..n {
                    let di = ix.abs_diff(jx);
                    for jy in 0..n {
                        let dj = iy.abs_diff(jy);
                        let row_base = (di * n + dj) * n;
                        for jz in 0..n {
                            let dk = iz.abs_diff(jz);
                            acc += (row[j] - part[row_base + dk] * fi * smu[j]).abs();
                            j += 1;
                        }
                    }
                }
                *norm = acc;
            }
            out
        })
        .reduce(
            || vec![0.0f64; channels],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x = x.max(*y);
                }
                a
            },
        );
    Ok(norms)
}

/// Orthonormal basis of the five collision invariants on the lattice:
/// `sqrt_mu` times `1, v_x, v_y, v_z, (|v|^2 - 3)/sqrt(6)`, normalized under
/// the plain `h^3` inner product by modified Gram-Schmidt. The raw vectors are
/// already nearly orthonormal (midpoint sums of smooth decaying integrands);
/// `gram_defect` records how nearly.
#[derive(Debug, Clone)]
pub struct SpectralProjector<S> {
    cell: S,
    basis: Vec<Vec<S>>,
    gram_defect: f64,
}

impl<S: Scalar> SpectralProjector<S> {
    pub fn new(grid: &VelocityGrid<S>) -> Self {
        let cell = grid.cell_volume();
        let raw = raw_invariants(grid);
        // Defect of the raw Gram matrix against the identity.
        let mut gram_defect = 0.0f64;
        for a in 0..5 {
            for b in 0..5 {
                let ip = inner(&raw[a], &raw[b], cell).to_f64_lossy();
                let target = if a == b { 1.0 } else { 0.0 };
                gram_defect = gram_defect.max((ip - target).abs());
            }
        }
        let basis = gram_schmidt(raw, |x, y| inner(x, y, cell));
        SpectralProjector { cell, basis, gram_defect }
    }

    pub fn gram_defect(&self) -> f64 {
        self.gram_defect
    }

    pub fn basis(&self) -> &[Vec<S>] {
        &self.basis
    }

    /// Coefficients of `f` along the orthonormal invariants.
    pub fn coefficients(&self, f: &[S]) -> [S; 5] {
        let mut c = [S::zero(); 5];
        for (k, b) in self.basis.iter().enumerate() {
            c[k] = inner(b, f, self.cell);
        }
        c
    }

    /// `out = P f`, the projection onto the invariant span.
    pub fn apply(&self, f: &[S], out: &mut [S]) {
        let c = self.coefficients(f);
        for o in out.iter_mut() {
            *o = S::zero();
        }
        for (k, b) in self.basis.iter().enumerate() {
            for (o, &e) in out.iter_mut().zip(b) {
                *o += c[k] * e;
            }
        }
    }

    /// Removes the invariant components of `f` in place.
    pub fn complement_in_place(&self, f: &mut [S]) {
        let c = self.coefficients(f);
        for (k, b) in self.basis.iter().enumerate() {
            for (x, &e) in f.iter_mut().zip(b) {
                *x -= c[k] * e;
            }
        }
    }
}

fn raw_invariants<S: Scalar>(grid: &VelocityGrid<S>) -> Vec<Vec<S>> {
    let dim = grid.len();
    // (2 pi)^{-1/4} makes the continuum vectors unit-norm, since the
    // Maxwellian itself carries mass sqrt(2 pi).
    let norm = S::c(std::f64::consts::TAU.powf(-0.25));
    let inv_sqrt6 = S::c(1.0 / 6.0f64.sqrt());
    let mut raw = vec![vec![S::zero(); dim]; 5];
    for i in 0..dim {
        let v = grid.node(i);
        let s = grid.speed_sq(i);
        let base = sqrt_mu(s) * norm;
        raw[0][i] = base;
        raw[1][i] = v[0] * base;
        raw[2][i] = v[1] * base;
        raw[3][i] = v[2] * base;
        raw[4][i] = (s - S::c(3.0)) * inv_sqrt6 * base;
    }
    raw
}

fn inner<S: Scalar>(a: &[S], b: &[S], cell: S) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc * cell
}

fn gram_schmidt<S: Scalar>(
    mut vecs: Vec<Vec<S>>,
    ip: impl Fn(&[S], &[S]) -> S,
) -> Vec<Vec<S>> {
    for k in 0..vecs.len() {
        // Two projection passes for numerical orthogonality.
        for _ in 0..2 {
            for j in 0..k {
                let (head, tail) = vecs.split_at_mut(k);
                let c = ip(&head[j], &tail[0]);
                for (x, &e) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= c * e;
                }
            }
        }
        let norm = ip(&vecs[k], &vecs[k]).sqrt();
        assert!(
            norm.to_f64_lossy() > 1e-12,
            "invariant basis degenerated during orthonormalization"
        );
        for x in vecs[k].iter_mut() {
            *x /= norm;
        }
    }
    vecs
}

/// BGK-type surrogate of the linearized operator: `B f = nu (f - P_nu f)` with
/// `P_nu` the nu-weighted orthogonal projector onto the collision invariants.
/// `B` is symmetric positive semidefinite with kernel exactly the invariant
/// span, all five plain moments of `B f` vanish identically, and the matching
/// surrogate bilinear form `nu (I - P_nu)(f g)` conserves them too. The
/// marching solvers use it when a deterministic, assembly-free operator is
/// wanted.
#[derive(Debug, Clone)]
pub struct BgkSurrogate<S> {
    nu: Vec<S>,
    cell: S,
    /// Basis of the invariant span, orthonormal under the nu-weighted product.
    basis: Vec<Vec<S>>,
}

impl<S: Scalar> BgkSurrogate<S> {
    pub fn new(grid: &VelocityGrid<S>, nu: Vec<S>) -> Result<Self> {
        if nu.len() != grid.len() {
            return Err(Error::Dimension {
                context: "surrogate collision frequency table",
                expected: grid.len(),
                got: nu.len(),
            });
        }
        if nu.iter().any(|x| !(x.to_f64_lossy() > 0.0)) {
            return Err(Error::config("collision frequency must be strictly positive"));
        }
        let cell = grid.cell_volume();
        let raw = raw_invariants(grid);
        let nu_ref = &nu;
        let basis = gram_schmidt(raw, |a, b| {
            let mut acc = S::zero();
            for ((x, y), &w) in a.iter().zip(b).zip(nu_ref) {
                acc += *x * *y * w;
            }
            acc * cell
        });
        Ok(BgkSurrogate { nu, cell, basis })
    }

    pub fn nu(&self) -> &[S] {
        &self.nu
    }

    pub fn nu_min(&self) -> f64 {
        self.nu
            .iter()
            .map(|x| x.to_f64_lossy())
            .fold(f64::INFINITY, f64::min)
    }

    fn project_nu(&self, f: &[S]) -> [S; 5] {
        let mut c = [S::zero(); 5];
        for (k, b) in self.basis.iter().enumerate() {
            let mut acc = S::zero();
            for ((x, y), &w) in b.iter().zip(f).zip(&self.nu) {
                acc += *x * *y * w;
            }
            c[k] = acc * self.cell;
        }
        c
    }

    /// `out = P_nu f`.
    pub fn apply_projector(&self, f: &[S], out: &mut [S]) {
        let c = self.project_nu(f);
        for o in out.iter_mut() {
            *o = S::zero();
        }
        for (k, b) in self.basis.iter().enumerate() {
            for (o, &e) in out.iter_mut().zip(b) {
                *o += c[k] * e;
            }
        }
    }

    /// `out = B f = nu (f - P_nu f)`.
    pub fn apply(&self, f: &[S], out: &mut [S]) {
        self.apply_projector(f, out);
        for ((o, &x), &n) in out.iter_mut().zip(f).zip(&self.nu) {
            *o = n * (x - *o);
        }
    }

    /// Surrogate gain `nu P_nu f`, so that `B = nu I - gain` mirrors the full
    /// operator's `L = nu I - K`.
    pub fn apply_gain(&self, f: &[S], out: &mut [S]) {
        self.apply_projector(f, out);
        for (o, &n) in out.iter_mut().zip(&self.nu) {
            *o = n * *o;
        }
    }

    /// Surrogate bilinear form `nu (I - P_nu)(f g)` (pointwise product).
    pub fn gamma(&self, f: &[S], g: &[S], out: &mut [S]) {
        let prod: Vec<S> = f.iter().zip(g).map(|(&a, &b)| a * b).collect();
        self.apply(&prod, out);
    }

    /// Exact smallest nonzero eigenvalue of the surrogate under the plain
    /// quotient, which equals `min nu`: on the equal-frequency orbit attaining
    /// the minimum there is room for a mode orthogonal to all five weighted
    /// invariants, and `B` acts on it as multiplication by `min nu`. The value
    /// is returned from an explicitly constructed such mode's Rayleigh
    /// quotient rather than from the minimum alone.
    pub fn coercivity(&self) -> Result<f64> {
        let nu_min = self.nu_min();
        let tol = nu_min * 1e-12;
        let orbit: Vec<usize> = self
            .nu
            .iter()
            .enumerate()
            .filter(|(_, x)| x.to_f64_lossy() <= nu_min + tol)
            .map(|(i, _)| i)
            .collect();
        if orbit.len() < 6 {
            return Err(Error::config(format!(
                "minimum-frequency orbit has {} nodes, need at least 6 to carry \
                 an invariant-free mode",
                orbit.len()
            )));
        }
        // Constraint rows: orthogonality to each weighted invariant restricted
        // to the orbit.
        let mut rows: Vec<Vec<f64>> = self
            .basis
            .iter()
            .map(|b| {
                orbit
                    .iter()
                    .map(|&i| (b[i] * self.nu[i]).to_f64_lossy())
                    .collect()
            })
            .collect();
        // Orthonormalize the constraint rows, dropping dependent ones.
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        for row in rows.drain(..) {
            let mut r = row;
            for o in &ortho {
                let c: f64 = r.iter().zip(o).map(|(x, y)| x * y).sum();
                for (x, y) in r.iter_mut().zip(o) {
                    *x -= c * y;
                }
            }
            let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-13 {
                for x in r.iter_mut() {
                    *x /= norm;
                }
                ortho.push(r);
            }
        }
        // Project seed vectors out of the constraints until one survives; a
        // random direction almost surely has a component in the free space
        // (the orbit has at least one dimension more than the constraints).
        let mut z: Option<Vec<f64>> = None;
        for attempt in 0..16u64 {
            let mut rng = substream(0x706b696e, "surrogate-mode", attempt);
            let mut normals = NormalSource::new();
            let mut seedvec: Vec<f64> =
                (0..orbit.len()).map(|_| normals.next(&mut rng)).collect();
            for o in &ortho {
                let c: f64 = seedvec.iter().zip(o).map(|(x, y)| x * y).sum();
                for (x, y) in seedvec.iter_mut().zip(o) {
                    *x -= c * y;
                }
            }
            let norm: f64 = seedvec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for x in seedvec.iter_mut() {
                    *x /= norm;
                }
                z = Some(seedvec);
                break;
            }
        }
        let z = z.ok_or_else(|| {
            Error::config("failed to build an invariant-free mode on the minimum orbit")
        })?;
        // Rayleigh quotient of the embedded mode.
        let dim = self.nu.len();
        let mut g = vec![S::zero(); dim];
        for (&i, &x) in orbit.iter().zip(&z) {
            g[i] = S::c(x);
        }
        let mut bg = vec![S::zero(); dim];
        self.apply(&g, &mut bg);
        let num: f64 = bg
            .iter()
            .zip(&g)
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum();
        let den: f64 = g.iter().map(|x| x.to_f64_lossy().powi(2)).sum();
        Ok(num / den)
    }
}

/// Smallest value of the nu-weighted Rayleigh quotient
/// `<A g, g> / <nu g, g>` seen over complement-projected random probes with a
/// few projected-gradient refinement steps each. For the linearized operator
/// this estimates the spectral-gap constant of the coercivity bound
/// `<L g, g> >= delta <nu g, g>` on the invariant-free subspace.
pub fn coercivity_constant<S: Scalar>(
    apply: &dyn Fn(&[S], &mut [S]),
    projector: &SpectralProjector<S>,
    nu: &[S],
    probes: usize,
    refine_steps: usize,
    seed: u64,
) -> f64 {
    let dim = nu.len();
    let quotient = |g: &[S], ag: &[S]| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((a, x), w) in ag.iter().zip(g).zip(nu) {
            num += a.to_f64_lossy() * x.to_f64_lossy();
            den += w.to_f64_lossy() * x.to_f64_lossy() * x.to_f64_lossy();
        }
        num / den
    };
    let mut best = f64::INFINITY;
    let mut ag = vec![S::zero(); dim];
    for p in 0..probes {
        let mut rng = substream(seed, "coercivity-probe", p as u64);
        let mut normals = NormalSource::new();
        let mut g: Vec<S> = (0..dim).map(|_| S::c(normals.next(&mut rng))).collect();
        projector.complement_in_place(&mut g);
        apply(&g, &mut ag);
        let mut r = quotient(&g, &ag);
        best = best.min(r);
        let mut step = 0.5;
        for _ in 0..refine_steps {
            // Projected gradient of the quotient: d = A g - r (nu g).
            let d: Vec<S> = ag
                .iter()
                .zip(&g)
                .zip(nu)
                .map(|((a, x), w)| *a - S::c(r) * *w * *x)
                .collect();
            let dnorm: f64 = d.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            let gnorm: f64 = g.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if dnorm <= 1e-14 * gnorm.max(1.0) {
                break;
            }
            let scale = S::c(step * gnorm / dnorm);
            let mut cand: Vec<S> = g.iter().zip(&d).map(|(x, y)| *x - scale * *y).collect();
            projector.complement_in_place(&mut cand);
            apply(&cand, &mut ag);
            let rc = quotient(&cand, &ag);
            if rc < r {
                g = cand;
                r = rc;
                best = best.min(r);
                step *= 1.3;
            } else {
                step *= 0.4;
                // Restore ag for the current g before the next loop.
                apply(&g, &mut ag);
            }
        }
    }
    best
}

/// Monte Carlo estimate of a collision bilinear form on the lattice.
#[derive(Debug, Clone)]
pub struct GammaEstimate<S> {
    pub values: Vec<S>,
    /// Discrete mass moment of the raw estimate before any projection.
    pub raw_mass_moment: f64,
}

/// Bilinear collision form `Gamma(f, g)` estimated per output node with the
/// shared importance sampler: gain `B f(u') g(v')` against loss
/// `B f(u) g(v)`, both with off-grid values read through the deposit stencil.
/// With `project_mass` the exact Maxwellian-direction component is removed
/// (mass conservation restored to rounding); the pre-projection moment is
/// reported either way.
pub fn gamma_bilinear<S: Scalar>(
    grid: &VelocityGrid<S>,
    gamma: f64,
    stencil: DepositStencil,
    f: &[S],
    g: &[S],
    samples_per_node: u64,
    seed: u64,
    project_mass: bool,
) -> Result<GammaEstimate<S>> {
    validate_gamma(gamma)?;
    check_field(grid, f, "gamma first argument")?;
    check_field(grid, g, "gamma second argument")?;
    let values = gamma_mc(grid, gamma, stencil, samples_per_node, seed, "gamma-bilinear", |ctx| {
        let gain = ctx.read(f, ctx.up) * ctx.read(g, ctx.vp);
        let loss = ctx.read(f, ctx.u) * g[ctx.node].to_f64_lossy();
        gain - loss
    });
    Ok(finish_gamma(grid, values, project_mass))
}

/// Symmetrized pair `Gamma(r, f) + Gamma(f, r)` in one sampling pass. With
/// `r = sqrt_mu` this equals `-L f` in the continuum, which is the consistency
/// check between the matrix operator and the sampler; with `r` a steady state
/// it is the extra linear term of the equations linearized around it.
pub fn gamma_symmetric_pair<S: Scalar>(
    grid: &VelocityGrid<S>,
    gamma: f64,
    stencil: DepositStencil,
    reference: &[S],
    f: &[S],
    samples_per_node: u64,
    seed: u64,
) -> Result<GammaEstimate<S>> {
    validate_gamma(gamma)?;
    check_field(grid, reference, "gamma reference argument")?;
    check_field(grid, f, "gamma perturbation argument")?;
    let values = gamma_mc(grid, gamma, stencil, samples_per_node, seed, "gamma-pair", |ctx| {
        let gain = ctx.read(reference, ctx.up) * ctx.read(f, ctx.vp)
            + ctx.read(f, ctx.up) * ctx.read(reference, ctx.vp);
        let loss = ctx.read(reference, ctx.u) * f[ctx.node].to_f64_lossy()
            + ctx.read(f, ctx.u) * reference[ctx.node].to_f64_lossy();
        gain - loss
    });
    Ok(finish_gamma(grid, values, false))
}

/// The extra linear term that appears when the equations are linearized
/// around a frozen reference state: `f -> -(Gamma(ref, f) + Gamma(f, ref))`.
/// The reference is captured once and every application replays the same
/// sampling streams, so the map is deterministic and linear in the reference
/// sample by sample; scaling `ref` by a power of two scales the output
/// bitwise.
#[derive(Debug, Clone)]
pub struct LinearizedGamma<S> {
    grid: VelocityGrid<S>,
    gamma: f64,
    stencil: DepositStencil,
    reference: Vec<S>,
    samples_per_node: u64,
    seed: u64,
}

impl<S: Scalar> LinearizedGamma<S> {
    pub fn new(
        grid: &VelocityGrid<S>,
        gamma: f64,
        stencil: DepositStencil,
        reference: &[S],
        samples_per_node: u64,
        seed: u64,
    ) -> Result<Self> {
        validate_gamma(gamma)?;
        check_field(grid, reference, "linearization reference")?;
        if samples_per_node == 0 {
            return Err(Error::config("samples_per_node must be at least 1"));
        }
        Ok(LinearizedGamma {
            grid: grid.clone(),
            gamma,
            stencil,
            reference: reference.to_vec(),
            samples_per_node,
            seed,
        })
    }

    pub fn reference(&self) -> &[S] {
        &self.reference
    }

    /// Applies the frozen-reference term to a perturbation.
    pub fn apply(&self, f: &[S]) -> Result<Vec<S>> {
        let est = gamma_symmetric_pair(
            &self.grid,
            self.gamma,
            self.stencil,
            &self.reference,
            f,
            self.samples_per_node,
            self.seed,
        )?;
        Ok(est.values.into_iter().map(|x| -x).collect())
    }
}

fn check_field<S: Scalar>(grid: &VelocityGrid<S>, f: &[S], context: &'static str) -> Result<()> {
    if f.len() != grid.len() {
        return Err(Error::Dimension {
            context,
            expected: grid.len(),
            got: f.len(),
        });
    }
    Ok(())
}

/// Per-sample context handed to the bilinear integrands.
struct GammaSample<'a> {
    grid_n: usize,
    v_max: f64,
    h: f64,
    stencil: DepositStencil,
    inv_smu: &'a [f64],
    node: usize,
    u: [f64; 3],
    up: [f64; 3],
    vp: [f64; 3],
}

impl GammaSample<'_> {
    fn read<S: Scalar>(&self, values: &[S], p: [f64; 3]) -> f64 {
        interp_at(values, self.stencil, p, self.grid_n, self.v_max, self.h, self.inv_smu)
    }
}

fn gamma_mc<S: Scalar>(
    grid: &VelocityGrid<S>,
    gamma: f64,
    stencil: DepositStencil,
    samples_per_node: u64,
    seed: u64,
    label: &str,
    integrand: impl Fn(&GammaSample<'_>) -> f64 + Sync,
) -> Vec<f64> {
    let dim = grid.len();
    let n = grid.n_per_axis();
    let h = grid.spacing();
    let v_max = grid.v_max();
    let inv_smu: Vec<f64> = (0..dim)
        .map(|i| 1.0 / sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy()))
        .collect();
    let base = IMPORTANCE_CONST / samples_per_node as f64;
    (0..dim)
        .into_par_iter()
        .map(|i| {
            let v = grid.node(i);
            let v = [v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()];
            let mut acc = 0.0;
            for_each_collision_sample(
                seed,
                label,
                i as u64,
                v,
                gamma,
                samples_per_node,
                &mut |_rl, b, vp, up, u| {
                    if b == 0.0 {
                        return;
                    }
                    let ctx = GammaSample {
                        grid_n: n,
                        v_max,
                        h,
                        stencil,
                        inv_smu: &inv_smu,
                        node: i,
                        u,
                        up,
                        vp,
                    };
                    acc += b * integrand(&ctx);
                },
            );
            base * acc
        })
        .collect()
}

fn finish_gamma<S: Scalar>(
    grid: &VelocityGrid<S>,
    values: Vec<f64>,
    project_mass: bool,
) -> GammaEstimate<S> {
    let cell = grid.cell_volume().to_f64_lossy();
    let smu: Vec<f64> = (0..grid.len())
        .map(|i| sqrt_mu::<f64>(grid.speed_sq(i).to_f64_lossy()))
        .collect();
    let raw_mass_moment: f64 = values
        .iter()
        .zip(&smu)
        .map(|(v, s)| v * s)
        .sum::<f64>()
        * cell;
    let mut values = values;
    if project_mass {
        let smu_sq: f64 = smu.iter().map(|s| s * s).sum::<f64>() * cell;
        let coeff = raw_mass_moment / smu_sq;
        for (v, s) in values.iter_mut().zip(&smu) {
            *v -= coeff * s;
        }
    }
    GammaEstimate {
        values: values.into_iter().map(S::c).collect(),
        raw_mass_moment,
    }
}

/// Gain/loss split of a linearized collision operator, as consumed by the
/// transport stepper: `L f = nu f - gain(f)`.
///
/// Both the assembled kernel model and the relaxation surrogate implement
/// this, so marching code can run against either without caring which one
/// produced the rates.
pub trait CollisionOperator<S>: Sync {
    /// Collision frequency table, one entry per velocity node.
    fn nu(&self) -> &[S];

    /// Writes the gain part applied to one velocity row into `out`.
    fn gain_into(&self, f: &[S], out: &mut [S]);
}

impl<S: Scalar> CollisionOperator<S> for CollisionModel<S> {
    fn nu(&self) -> &[S] {
        CollisionModel::nu(self)
    }

    fn gain_into(&self, f: &[S], out: &mut [S]) {
        self.apply_k(f, out);
    }
}

impl<S: Scalar> CollisionOperator<S> for BgkSurrogate<S> {
    fn nu(&self) -> &[S] {
        BgkSurrogate::nu(self)
    }

    fn gain_into(&self, f: &[S], out: &mut [S]) {
        self.apply_gain(f, out);
    }
}
