//! Policy gradient methods for finite-horizon entropy-regularised stochastic
//! linear-quadratic control.
//!
//! The crate evaluates Gaussian feedback policies exactly through matrix
//! ODEs ([`ode`]), runs natural policy gradient iterations with a
//! Bures–Wasserstein update for the covariance ([`pg`]), checks landscape
//! inequalities numerically ([`landscape`]) and provides a Monte Carlo layer
//! that only touches simulated trajectories ([`mc`]).

pub mod benchmark;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod landscape;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod ode;
pub mod pg;
pub mod policy;
pub mod validate;

pub use entropy::relative_entropy_gaussian;
pub use error::{LqcError, Result};
pub use grid::TimeGrid;
pub use linalg::{loewner_compare, psd_sqrt, LoewnerOrder, Mat, Vector};
pub use model::{Coefficient, LqcModel};
pub use ode::{CostBreakdown, RiccatiSolution, Scheme, Solver, SolverOptions, TrajectorySolution};
pub use policy::Policy;
pub use validate::{validate_model, ValidationReport};
