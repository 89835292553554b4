//! Velocity grids, distribution fields, weight functions, and norms.
//!
//! The velocity domain is the cube `[-v_max, v_max]^3` discretized by a
//! midpoint Cartesian lattice: along each axis the nodes are
//! `-v_max + (k + 1/2) h` with `h = 2 v_max / n`, so for even `n` no node lies
//! on a coordinate plane and every boundary half-grid is unambiguous. All
//! velocity quadratures are plain node sums with the uniform weight `h^3`.

use crate::error::Error;
use crate::{Result, Scalar};

/// Which slab wall a boundary quantity refers to.
///
/// The slab occupies `0 <= x <= length` along the first velocity axis; `Left`
/// is the wall at `x = 0` (inward normal `+e_x`), `Right` at `x = length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Sign of the inward normal's x-component.
    pub fn inward_sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

/// Which half of velocity space at a wall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    /// Velocities entering the domain (`v . n > 0`).
    Incoming,
    /// Velocities leaving the domain (`v . n < 0`).
    Outgoing,
}

/// Midpoint Cartesian velocity lattice on `[-v_max, v_max]^3`.
#[derive(Debug, Clone)]
pub struct VelocityGrid<S> {
    v_max: f64,
    n_per_axis: usize,
    spacing: f64,
    nodes: Vec<[S; 3]>,
    /// Node indices with `v_x > 0` (entering through the left wall).
    positive_x: Vec<u32>,
    /// Node indices with `v_x < 0`.
    negative_x: Vec<u32>,
}

impl<S: Scalar> VelocityGrid<S> {
    pub fn new(v_max: f64, n_per_axis: usize) -> Result<Self> {
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::config(format!("v_max must be positive, got {v_max}")));
        }
        if n_per_axis < 2 {
            return Err(Error::config(format!(
                "n_per_axis must be at least 2, got {n_per_axis}"
            )));
        }
        let n = n_per_axis;
        let h = 2.0 * v_max / n as f64;
        let axis: Vec<f64> = (0..n).map(|k| -v_max + (k as f64 + 0.5) * h).collect();
        let mut nodes = Vec::with_capacity(n * n * n);
        let mut positive_x = Vec::new();
        let mut negative_x = Vec::new();
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let idx = nodes.len() as u32;
                    nodes.push([S::c(axis[ix]), S::c(axis[iy]), S::c(axis[iz])]);
                    if axis[ix] > 0.0 {
                        positive_x.push(idx);
                    } else if axis[ix] < 0.0 {
                        negative_x.push(idx);
                    }
                    // Odd n puts nodes on the v_x = 0 plane; they belong to
                    // neither half-grid and never carry boundary flux.
                }
            }
        }
        Ok(VelocityGrid {
            v_max,
            n_per_axis,
            spacing: h,
            nodes,
            positive_x,
            negative_x,
        })
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    /// Lattice spacing `h = 2 v_max / n`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Uniform quadrature weight `h^3` of one node.
    pub fn cell_volume(&self) -> S {
        let h = self.spacing;
        S::c(h * h * h)
    }

    /// Number of velocity nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> [S; 3] {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[[S; 3]] {
        &self.nodes
    }

    /// Splits a flat node index into its `(ix, iy, iz)` axis indices.
    pub fn axis_indices(&self, i: usize) -> [usize; 3] {
        let n = self.n_per_axis;
        [i / (n * n), (i / n) % n, i % n]
    }

    /// Flat index of the node with the given axis indices.
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let n = self.n_per_axis;
        (ix * n + iy) * n + iz
    }

    /// Axis coordinate of index `k`.
    pub fn axis_coord(&self, k: usize) -> f64 {
        -self.v_max + (k as f64 + 0.5) * self.spacing
    }

    /// Node indices whose velocity enters the domain through `side`.
    pub fn incoming(&self, side: Side) -> &[u32] {
        match side {
            Side::Left => &self.positive_x,
            Side::Right => &self.negative_x,
        }
    }

    /// Node indices whose velocity leaves the domain through `side`.
    pub fn outgoing(&self, side: Side) -> &[u32] {
        match side {
            Side::Left => &self.negative_x,
            Side::Right => &self.positive_x,
        }
    }

    pub fn half(&self, side: Side, half: Half) -> &[u32] {
        match half {
            Half::Incoming => self.incoming(side),
            Half::Outgoing => self.outgoing(side),
        }
    }

    /// Squared speed of node `i`.
    pub fn speed_sq(&self, i: usize) -> S {
        let v = self.nodes[i];
        v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    }
}

/// Polynomial-exponential velocity weight `w(v) = (1+|v|^2)^{beta/2} e^{q |v|^2}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WeightSpec {
    pub q: f64,
    pub beta: f64,
}

impl WeightSpec {
    /// Default weight used by the solvers and the norm reports.
    pub fn default_for(gamma: f64) -> Self {
        let _ = gamma;
        WeightSpec { q: 1.0 / 16.0, beta: 4.5 }
    }

    /// Checks the admissible ranges: `0 <= q < 1/8` (so `w^2 mu` stays
    /// integrable with margin) and `beta > max(3, 3 - gamma)`.
    pub fn validate(&self, gamma: f64) -> Result<()> {
        if !(0.0..0.125).contains(&self.q) {
            return Err(Error::config(format!(
                "weight exponent q must lie in [0, 1/8), got {}",
                self.q
            )));
        }
        let beta_min = 3.0f64.max(3.0 - gamma);
        if !(self.beta > beta_min) {
            return Err(Error::config(format!(
                "weight power beta must exceed max(3, 3 - gamma) = {beta_min}, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Weight value at squared speed `|v|^2`.
    pub fn eval_sq<S: Scalar>(&self, speed_sq: S) -> S {
        let one = S::one();
        (one + speed_sq).powf(S::c(self.beta / 2.0)) * (S::c(self.q) * speed_sq).exp()
    }

    /// Weight table over a grid.
    pub fn table<S: Scalar>(&self, grid: &VelocityGrid<S>) -> Vec<S> {
        (0..grid.len()).map(|i| self.eval_sq(grid.speed_sq(i))).collect()
    }
}

/// Whether field values are raw (`f`) or pre-multiplied by the weight (`w f`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repr {
    Plain,
    Weighted,
}

/// Time-space-velocity array with layout `[t][x][v]`, velocity fastest.
#[derive(Debug, Clone)]
pub struct DistributionField<S> {
    pub n_t: usize,
    pub n_x: usize,
    pub n_v: usize,
    pub repr: Repr,
    data: Vec<S>,
}

impl<S: Scalar> DistributionField<S> {
    pub fn zeros(n_t: usize, n_x: usize, n_v: usize) -> Self {
        DistributionField {
            n_t,
            n_x,
            n_v,
            repr: Repr::Plain,
            data: vec![S::zero(); n_t * n_x * n_v],
        }
    }

    pub fn from_fn(
        n_t: usize,
        n_x: usize,
        n_v: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut field = Self::zeros(n_t, n_x, n_v);
        for t in 0..n_t {
            for x in 0..n_x {
                for v in 0..n_v {
                    let val = f(t, x, v);
                    field.data[(t * n_x + x) * n_v + v] = val;
                }
            }
        }
        field
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The `(n_x * n_v)`-slice at time index `t`.
    pub fn slice_t(&self, t: usize) -> &[S] {
        let stride = self.n_x * self.n_v;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn slice_t_mut(&mut self, t: usize) -> &mut [S] {
        let stride = self.n_x * self.n_v;
        &mut self.data[t * stride..(t + 1) * stride]
    }

    /// The velocity row at `(t, x)`.
    pub fn row(&self, t: usize, x: usize) -> &[S] {
        let start = (t * self.n_x + x) * self.n_v;
        &self.data[start..start + self.n_v]
    }

    pub fn at(&self, t: usize, x: usize, v: usize) -> S {
        self.data[(t * self.n_x + x) * self.n_v + v]
    }

    pub fn at_mut(&mut self, t: usize, x: usize, v: usize) -> &mut S {
        &mut self.data[(t * self.n_x + x) * self.n_v + v]
    }

    /// Multiplies every velocity row by the weight table in place and flips
    /// the representation tag.
    pub fn into_weighted(mut self, weights: &[S]) -> Self {
        assert_eq!(weights.len(), self.n_v, "weight table length");
        match self.repr {
            Repr::Weighted => self,
            Repr::Plain => {
                for chunk in self.data.chunks_exact_mut(self.n_v) {
                    for (f, w) in chunk.iter_mut().zip(weights) {
                        *f *= *w;
                    }
                }
                self.repr = Repr::Weighted;
                self
            }
        }
    }
}

/// Sup of `|w(v) f|` over all entries. Weighted-representation fields are
/// taken as already multiplied by `w`; plain fields are multiplied on the fly.
pub fn weighted_sup_norm<S: Scalar>(field: &DistributionField<S>, weights: &[S]) -> S {
    match field.repr {
        Repr::Weighted => field
            .as_slice()
            .iter()
            .fold(S::zero(), |acc, &x| acc.max(x.abs())),
        Repr::Plain => {
            assert_eq!(weights.len(), field.n_v, "weight table length");
            let mut acc = S::zero();
            for chunk in field.as_slice().chunks_exact(field.n_v) {
                for (f, w) in chunk.iter().zip(weights) {
                    acc = acc.max((*f * *w).abs());
                }
            }
            acc
        }
    }
}

/// Velocity-space L2 norm per time slice, sup over slices:
/// `max_t sqrt( sum_{x,v} nu(v)^p f^2 dx h^3 )`.
///
/// `nu_pow` is an optional per-node table of the collision frequency already
/// raised to the desired power; `None` means the unweighted norm.
pub fn l2_norm<S: Scalar>(
    field: &DistributionField<S>,
    grid: &VelocityGrid<S>,
    dx: f64,
    nu_pow: Option<&[S]>,
) -> S {
    assert_eq!(field.n_v, grid.len(), "field/grid node count");
    let measure = grid.cell_volume() * S::c(dx);
    let mut best = S::zero();
    for t in 0..field.n_t {
        let mut sum = S::zero();
        for chunk in field.slice_t(t).chunks_exact(field.n_v) {
            match nu_pow {
                None => {
                    for &f in chunk {
                        sum += f * f;
                    }
                }
                Some(nu) => {
                    for (f, n) in chunk.iter().zip(nu) {
                        sum += *f * *f * *n;
                    }
                }
            }
        }
        best = best.max((sum * measure).sqrt());
    }
    best
}

/// Boundary-flux norm of a wall trace: `sqrt( sum_{half} f(v)^2 |v_x| h^3 )`.
///
/// `trace` holds one value per velocity node; only the selected half-grid
/// contributes.
pub fn boundary_norm<S: Scalar>(
    trace: &[S],
    grid: &VelocityGrid<S>,
    side: Side,
    half: Half,
) -> S {
    assert_eq!(trace.len(), grid.len(), "trace/grid node count");
    let mut sum = S::zero();
    for &i in grid.half(side, half) {
        let v = grid.node(i as usize);
        let f = trace[i as usize];
        sum += f * f * v[0].abs();
    }
    (sum * grid.cell_volume()).sqrt()
}

/// Discrete mass moment of one time slice: `sum_{x,v} f sqrt_mu dx h^3`.
pub fn mass_moment<S: Scalar>(
    slice: &[S],
    grid: &VelocityGrid<S>,
    dx: f64,
    sqrt_mu: &[S],
) -> S {
    assert_eq!(sqrt_mu.len(), grid.len(), "sqrt_mu/grid node count");
    assert_eq!(slice.len() % grid.len(), 0, "slice must be whole velocity rows");
    let mut sum = S::zero();
    for chunk in slice.chunks_exact(grid.len()) {
        for (f, s) in chunk.iter().zip(sqrt_mu) {
            sum += *f * *s;
        }
    }
    sum * grid.cell_volume() * S::c(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type G = VelocityGrid<f64>;

    #[test]
    fn grid_geometry_is_symmetric_midpoint() {
        let g = G::new(6.0, 16).unwrap();
        assert_eq!(g.len(), 4096);
        assert_relative_eq!(g.spacing(), 0.75);
        // Midpoint lattice: no node on a coordinate plane, and the node set is
        // symmetric under v -> -v.
        for i in 0..g.len() {
            let v = g.node(i);
            assert!(v[0] != 0.0 && v[1] != 0.0 && v[2] != 0.0);
            let [ix, iy, iz] = g.axis_indices(i);
            let j = g.flat_index(15 - ix, 15 - iy, 15 - iz);
            let u = g.node(j);
            for k in 0..3 {
                assert_relative_eq!(v[k], -u[k], max_relative = 1e-14);
            }
        }
        // Extreme nodes sit half a spacing inside the box.
        assert_relative_eq!(g.axis_coord(0), -6.0 + 0.375);
        assert_relative_eq!(g.axis_coord(15), 6.0 - 0.375);
    }

    #[test]
    fn half_grids_partition_even_and_odd() {
        let even = G::new(4.0, 8).unwrap();
        assert_eq!(even.incoming(Side::Left).len(), 256);
        assert_eq!(even.outgoing(Side::Left).len(), 256);
        let odd = G::new(4.0, 9).unwrap();
        // One axis slab of 9^2 nodes sits on v_x = 0 and joins neither half.
        assert_eq!(odd.incoming(Side::Left).len(), 4 * 81);
        assert_eq!(odd.outgoing(Side::Left).len(), 4 * 81);
        assert_eq!(odd.len() - 2 * 4 * 81, 81);
        // Left-incoming is right-outgoing.
        assert_eq!(even.incoming(Side::Left), even.outgoing(Side::Right));
    }

    #[test]
    fn weight_spec_validation() {
        assert!(WeightSpec { q: 0.0, beta: 3.5 }.validate(1.0).is_ok());
        assert!(WeightSpec { q: 0.125, beta: 4.0 }.validate(1.0).is_err());
        assert!(WeightSpec { q: -0.01, beta: 4.0 }.validate(1.0).is_err());
        // For gamma = -1 the tail power must exceed 4.
        assert!(WeightSpec { q: 0.05, beta: 3.5 }.validate(-1.0).is_err());
        assert!(WeightSpec { q: 0.05, beta: 4.5 }.validate(-1.0).is_ok());
        let d = WeightSpec::default_for(-1.0);
        assert!(d.validate(-1.0).is_ok() && d.validate(1.0).is_ok());
    }

    #[test]
    fn weight_at_origin_is_one_and_grows() {
        let w = WeightSpec { q: 1.0 / 16.0, beta: 4.5 };
        assert_relative_eq!(w.eval_sq(0.0f64), 1.0);
        let mut last = 0.0;
        for s in [0.0, 1.0, 4.0, 9.0, 36.0] {
            let val = w.eval_sq(s);
            assert!(val > last, "weight must increase with speed");
            last = val;
        }
        // Spot value: (1+4)^{2.25} e^{4/16}.
        assert_relative_eq!(w.eval_sq(4.0f64), 5.0f64.powf(2.25) * 0.25f64.exp(), max_relative = 1e-14);
    }

    #[test]
    fn sup_norm_consistent_between_representations() {
        let g = G::new(3.0, 6).unwrap();
        let w = WeightSpec { q: 0.0, beta: 3.5 };
        let table = w.table(&g);
        let field = DistributionField::from_fn(2, 3, g.len(), |t, x, v| {
            ((t + 2 * x) as f64 + 1.0) * (-(v as f64) / 50.0).exp() * if v % 2 == 0 { 1.0 } else { -1.0 }
        });
        let plain = weighted_sup_norm(&field, &table);
        let weighted = weighted_sup_norm(&field.clone().into_weighted(&table), &table);
        assert_relative_eq!(plain, weighted, max_relative = 1e-14);
        assert!(plain > 0.0);
    }

    #[test]
    fn l2_norm_of_constant_matches_box_volume() {
        let g = G::new(5.0, 10).unwrap();
        let c = 0.37;
        let dx = 0.01;
        let n_x = 25;
        let field = DistributionField::from_fn(3, n_x, g.len(), |_, _, _| c);
        // sum f^2 dx h^3 = c^2 * (n_x dx) * (2 v_max)^3 exactly.
        let expect = c * (n_x as f64 * dx * 1000.0).sqrt();
        assert_relative_eq!(l2_norm(&field, &g, dx, None), expect, max_relative = 1e-13);
    }

    #[test]
    fn boundary_norm_counts_one_half_grid() {
        let g = G::new(2.0, 4).unwrap();
        let ones = vec![1.0; g.len()];
        let direct: f64 = g
            .incoming(Side::Left)
            .iter()
            .map(|&i| g.node(i as usize)[0].abs())
            .sum::<f64>()
            * g.cell_volume();
        assert_relative_eq!(
            boundary_norm(&ones, &g, Side::Left, Half::Incoming),
            direct.sqrt(),
            max_relative = 1e-14
        );
        // Both walls see the same speeds by symmetry.
        assert_relative_eq!(
            boundary_norm(&ones, &g, Side::Left, Half::Incoming),
            boundary_norm(&ones, &g, Side::Right, Half::Incoming),
            max_relative = 1e-14
        );
    }

    #[test]
    fn mass_moment_is_linear_in_the_slice() {
        let g = G::new(3.0, 6).unwrap();
        let sqrt_mu: Vec<f64> = (0..g.len())
            .map(|i| (-g.speed_sq(i) / 4.0).exp() * (2.0 * std::f64::consts::PI).powf(-0.25))
            .collect();
        let a = DistributionField::from_fn(1, 4, g.len(), |_, x, v| (x + v) as f64 * 1e-3);
        let b = DistributionField::from_fn(1, 4, g.len(), |_, x, v| ((x * v) as f64).sin());
        let dx = 0.25;
        let ma = mass_moment(a.slice_t(0), &g, dx, &sqrt_mu);
        let mb = mass_moment(b.slice_t(0), &g, dx, &sqrt_mu);
        let mut ab = a.clone();
        for (p, q) in ab.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *p = *p * 2.0 + 3.0 * *q;
        }
        let mab = mass_moment(ab.slice_t(0), &g, dx, &sqrt_mu);
        assert_relative_eq!(mab, 2.0 * ma + 3.0 * mb, max_relative = 1e-12);
    }
}
