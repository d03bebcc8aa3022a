//! Stochastic heat equation `du = nu u_xx dt + lambda sigma(u) W(dt dx)` on the
//! torus `[-1, 1]`: periodic heat kernels, noise, solvers, observables and the
//! Monte Carlo probes built on them.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `is_multiple_of` is newer than the supported toolchain.
#![allow(clippy::manual_is_multiple_of)]

pub mod error;
pub mod experiments;
pub mod expr;
pub mod grid;
pub mod inequalities;
pub mod kernel;
pub mod kernel_bounds;
pub mod noise;
pub mod observables;
pub mod picard;
pub mod quadrature;
pub mod sigma;
pub mod solver;
pub mod stats;
pub mod util;

pub use error::{Error, Result};
pub use experiments::{ExperimentPlan, PlanOutcome, ProbeSpec, ResultRow, Verdict};
pub use grid::{GridFunction, TorusPoint};
pub use kernel::KernelParams;
pub use noise::{NoiseGrid, RngSeed};
pub use observables::TrajectoryRecord;
pub use sigma::{Sigma, SigmaSpec};
pub use solver::SolverConfig;
