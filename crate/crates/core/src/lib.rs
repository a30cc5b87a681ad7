//! Spatially structured stochastic spiking-network simulator and its
//! hydrodynamic limit.
//!
//! The crate has three layers:
//!
//! * [`model`] / [`microsim`] — the microscopic piecewise-deterministic
//!   Markov process: `ε⁻²` neurons on a square mesh, chemical-synapse jumps
//!   sampled by thinning, gap-junction averaging and leak between spikes.
//! * [`partition`] / [`auxcouple`] — the discretized auxiliary process
//!   (frozen per-square rates, at most one spike per macro step) and the
//!   exact coupling of the two processes with good/bad label accounting.
//! * [`limit`] — the deterministic side: the per-square level/mass
//!   recursion, the piecewise-constant densities it induces, the δ-stepped
//!   transport scheme and the characteristics form of its limit.
//!
//! [`metrics`] closes the loop: bounded-Lipschitz distances between the
//! empirical measure and solved density fields, a one-particle Monte-Carlo
//! oracle, and the convergence-study driver. [`config`] and [`runner`] are
//! the reproducibility surface used by the `hydroneuro` binary.

pub mod auxcouple;
pub mod config;
pub mod limit;
pub mod metrics;
pub mod microsim;
pub mod model;
pub mod partition;
pub mod rng;
pub mod runner;
pub mod stats;

pub use config::ExperimentConfig;
pub use model::ModelSpec;
