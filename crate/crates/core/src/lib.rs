//! Robust optimal-liquidation solver.
//!
//! A trader must unwind a position by a hard deadline while trading costs are
//! driven by a diffusion factor process whose dynamics the trader does not
//! fully trust. The value function of the resulting inf-sup control problem
//! solves a semilinear parabolic PDE with a superlinear gradient term and a
//! singular terminal value. This crate computes that value function on a grid
//! (via the rescaling `w = (T-t)^{1/beta} v`, which turns the singular datum
//! into the finite terminal condition `w(T,.) = eta`), evaluates the explicit
//! sub/supersolution bounds that certify it, expands it for small ambiguity
//! levels, and verifies the feedback controls by Monte Carlo simulation.
//!
//! Modules map onto the pipeline:
//!
//! * [`params`] / [`model`] — problem parameters, coefficient fields, and
//!   sampled checks of the standing assumptions.
//! * [`grid`] / [`pde`] — space-time grids and the IMEX solver for the
//!   rescaled equation, plus the near-terminal fixed-point layer.
//! * [`bounds`] — computable sub/supersolution surfaces and sandwich
//!   certificates.
//! * [`asymptotics`] — first-order small-ambiguity correction (grid and
//!   Feynman-Kac) and the observational-equivalence refit.
//! * [`control`] — path simulation under reference and worst-case measures,
//!   cost estimation, and saddle-point checks.
//! * [`config`] / [`io`] — experiment configuration and file artifacts.
//!
//! The `parallel` feature (on by default) parallelizes sample sweeps, grid
//! lines, and Monte Carlo paths with rayon. Results are reduced in a fixed
//! order, so outputs are identical with and without the feature and for any
//! thread count.

pub mod asymptotics;
pub mod bounds;
pub mod config;
pub mod control;
pub mod error;
pub mod grid;
pub mod io;
pub mod math;
pub mod model;
pub mod par;
pub mod params;
pub mod pde;

pub use error::{Error, Result};
pub use grid::{SpaceBox, SpaceTimeGrid};
pub use model::{DriftField, FactorModel, ScalarField, VolField};
pub use params::RobustParams;
pub use pde::{SolverOptions, ValueSolution};
