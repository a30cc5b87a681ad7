//! Deterministic side of the hydrodynamic picture: the per-square level/mass
//! recursion, the piecewise-constant densities it induces, the δ-stepped
//! transport scheme, and the characteristics form of its limit.

mod closed_form;
mod curve;
mod field;
mod ledger;
mod pde;

pub use closed_form::{
    characteristic_flow, closed_form_density, weak_residual, CharacteristicPaths, WeakTestFn,
};
pub use curve::Curve;
pub use field::{l1_distance_fields, DensityField, FieldAt, LimitGrid};
pub use ledger::{
    density_from_ledger, ledger_init, ledger_step, ledger_vs_aux, LedgerComparison, Level,
    LevelLedger,
};
pub use pde::{rho_delta_step, solve_pde, spike_time_of_potential, PdeSolution, Trajectory};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LimitError {
    #[error(transparent)]
    Partition(#[from] crate::partition::PartitionError),
    #[error("level intervals overlap in square {square} near u = {at}; level ordering is corrupt")]
    OverlappingIntervals { square: usize, at: f64 },
    #[error("ledger and auxiliary runs use different partitions")]
    MismatchedPartitions,
    #[error("bisection bracket failed for u = {u} in [0, {delta}]; field normalization is corrupt")]
    NoBracket { u: f64, delta: f64 },
    #[error("delta sequence must be dyadic halvings with an integer number of steps to the horizon")]
    BadDeltaSequence,
}
