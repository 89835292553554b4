//! Discrete-velocity toolbox for linear and weakly nonlinear kinetic equations in a
//! slab, with diffuse-reflection walls whose temperature may oscillate in time.
//!
//! The crate is organized bottom-up:
//!
//! * [`vgrid`]: Cartesian velocity grids, weight functions, norms.
//! * [`equilibria`]: Maxwellians, wall temperature profiles, flux-calibrated
//!   boundary emission and the correction kernels it induces.
//! * [`geometry`]: spatial domains, backward exit times, diffuse-reflection
//!   sampling and backward time cycles.
//! * [`collision`]: the linearized collision operator (exact loss part, Monte
//!   Carlo gain part), its compact/remainder split, the macroscopic projector,
//!   the bilinear form, a BGK-type surrogate, and an on-disk kernel cache.
//! * [`transport`]: semi-Lagrangian marching for the damped transport equation
//!   with diffuse boundary data.
//! * [`solvers`]: damped linear solves, the steady and time-periodic problems,
//!   initial-value runs around a periodic state, and the geometric-decay
//!   iteration lemma checker.
//! * [`analysis`]: decay-rate fitting and audit helpers.
//!
//! Everything numerical is generic over the scalar type through [`Scalar`];
//! the crate root exports `f64` aliases for the common types since that is what
//! the binaries and the tests use. Random streams are always drawn in `f64` and
//! converted, so `f32` and `f64` instantiations of the same seeded computation
//! see identical sample sequences.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub mod analysis;
pub mod collision;
pub mod equilibria;
pub mod error;
pub mod geometry;
pub(crate) mod quad;
pub mod rng;
pub mod solvers;
pub mod transport;
pub mod vgrid;

pub use error::Error;

/// Floating-point scalar the numerical kernels are generic over.
///
/// The single extension on top of the `num-traits` bundle is [`Scalar::c`],
/// which converts an `f64` constant into the scalar type. Constants in this
/// crate are always written as `f64` literals and converted at the use site.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + for<'a> Sum<&'a Self>
    + Display
    + LowerExp
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into `Self`, rounding if needed.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant must be representable")
    }

    /// Converts `self` to `f64` for reporting and file output.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum<T>
        + for<'a> Sum<&'a T>
        + Display
        + LowerExp
        + Debug
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Default scalar type for the binaries and the test suite.
pub type Real = f64;

/// `f64` velocity grid.
pub type VelocityGrid = vgrid::VelocityGrid<Real>;
/// `f64` distribution field.
pub type DistributionField = vgrid::DistributionField<Real>;
/// `f64` wall model.
pub type WallModel = equilibria::WallModel<Real>;
/// `f64` boundary calibration.
pub type BoundaryCalibration = equilibria::BoundaryCalibration<Real>;
/// `f64` collision model.
pub type CollisionModel = collision::CollisionModel<Real>;
/// `f64` invariant projector.
pub type SpectralProjector = collision::SpectralProjector<Real>;
/// `f64` BGK-type surrogate operator.
pub type BgkSurrogate = collision::BgkSurrogate<Real>;
/// `f64` slab transport stepper.
pub type TransportStepper = transport::TransportStepper<Real>;
/// `f64` time-periodic solution.
pub type PeriodicSolution = solvers::PeriodicSolution<Real>;
/// `f64` steady wall solution.
pub type SteadySolution = solvers::SteadySolution<Real>;
/// `f64` initial-value march report.
pub type EvolveReport = solvers::EvolveReport<Real>;
