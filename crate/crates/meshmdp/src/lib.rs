//! Weighted stochastic mesh solver for discrete-time, finite-horizon Markov
//! decision processes with general transition densities.
//!
//! The solver simulates a cloud of state trajectories once under fixed
//! representative controls, then runs the Bellman recursion backwards over
//! that cloud. Conditional expectations are replaced by self-normalized
//! weighted sums whose weights are transition-density ratios with
//! leave-one-out denominators, so the same N trajectories are reused at every
//! step and for every candidate action. The cost of a solve is dominated by
//! the H·N² denominator evaluations.
//!
//! Modules:
//! - [`mdp`]: problem definition, mesh simulation, forward policy evaluation
//! - [`kernels`]: Gaussian shift and reflected transition kernels
//! - [`solver`]: denominator tables, weighted expectations, backward solve
//! - [`oracles`]: closed-form, grid-DP, and consistency references
//! - [`lqg`]: the linear-quadratic-Gaussian benchmark and its experiments
//! - [`rng`]: substreamed counter-based random number generation
//! - [`quad`]: Gauss-Hermite / Gauss-Legendre rules for the oracles

pub mod error;
pub mod kernels;
pub mod lqg;
pub mod mdp;
pub mod numeric;
pub mod oracles;
pub mod quad;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
