//! The discretized auxiliary process and its exact coupling with the true
//! network.
//!
//! The auxiliary process updates once per macro step of length δ. Within a
//! step every neuron spikes at most once, with the constant rate its square
//! center assigns to its start-of-step potential; spike times are recorded
//! only through their τ-bin. The coupling runs both processes on one
//! probability space so that neurons spike together as often as possible,
//! and keeps per-neuron good/bad labels that certify how long the two
//! trajectories stayed synchronized.

use serde::Serialize;
use thiserror::Error;

use crate::microsim::{self, NetworkState};
use crate::model::ModelSpec;
use crate::partition::{build_center_tables, relax, CenterTables, PartitionError, PartitionSpec};
use crate::rng::{exp_time, stream_rng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum AuxError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("true-process clock {clock} does not sit on macro step {step} of length {delta}")]
    ClockMismatch { clock: f64, step: usize, delta: f64 },
    #[error("state has {got} sites, system expects {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("partition sweeps must share (ell, ebin, tau) when compared; got mismatched cells")]
    MismatchedCells,
}

/// Mesh-resolved view of a partition: which square each site belongs to,
/// plus the frozen center tables.
pub struct AuxSystem<'a> {
    pub spec: &'a ModelSpec,
    pub part: PartitionSpec,
    pub tables: CenterTables,
    pub site_square: Vec<usize>,
}

impl<'a> AuxSystem<'a> {
    pub fn new(spec: &'a ModelSpec, part: PartitionSpec) -> Result<Self, AuxError> {
        part.validate_mesh(spec.mesh.epsilon)?;
        let tables = build_center_tables(spec, &part.centers, part.ell);
        let site_square = spec.mesh.sites.iter().map(|&s| part.square_of(s)).collect();
        Ok(AuxSystem { spec, part, tables, site_square })
    }

    fn rate_at_center(&self, u: f64, m: usize) -> f64 {
        self.spec.rate.evaluate(u, self.part.center(m))
    }

    /// Per-square average `ȳ(m) = ε² Σ_m' Σ_{i∈C_m'} b(i_m,i_m') y_i`.
    pub fn square_averages(&self, y: &[f64]) -> Vec<f64> {
        let mm = self.part.square_count();
        let eps2 = self.spec.mesh.epsilon * self.spec.mesh.epsilon;
        let mut square_sum = vec![0.0; mm];
        for (i, &yi) in y.iter().enumerate() {
            square_sum[self.site_square[i]] += yi;
        }
        (0..mm)
            .map(|m| {
                let row = &self.tables.gap_norm[m * mm..(m + 1) * mm];
                eps2 * row.iter().zip(&square_sum).map(|(b, s)| b * s).sum::<f64>()
            })
            .collect()
    }

    /// Deposits per square once the per-square, per-bin spike counts are
    /// known: `S(m,δ)` (everything) and `S(m,h)` (bins strictly before `h`,
    /// with `S(m,1) = 0`).
    fn deposits(&self, counts: &[Vec<u64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mm = self.part.square_count();
        let hh = self.part.time_bins;
        let eps2 = self.spec.mesh.epsilon * self.spec.mesh.epsilon;
        // cumulative counts over bins s = 1..h-1 per source square
        let mut s_delta = vec![0.0; mm];
        let mut s_h = vec![vec![0.0; hh + 1]; mm];
        for m in 0..mm {
            for h in 1..=hh {
                let cum: f64 = (0..mm)
                    .map(|mp| {
                        let c: u64 = counts[mp][..h - 1].iter().sum();
                        self.tables.syn[mp * mm + m] * c as f64
                    })
                    .sum();
                s_h[m][h] = eps2 * cum;
            }
            s_delta[m] = eps2
                * (0..mm)
                    .map(|mp| {
                        let c: u64 = counts[mp].iter().sum();
                        self.tables.syn[mp * mm + m] * c as f64
                    })
                    .sum::<f64>();
        }
        (s_delta, s_h)
    }

    /// Deterministic end-of-step update given each site's spike bin (`None`
    /// for non-spikers), the start-of-step averages, and the bin counts.
    fn advance(
        &self,
        state: &AuxState,
        spike_bin: &[Option<usize>],
        ybar: &[f64],
        counts: &[Vec<u64>],
    ) -> AuxState {
        let (s_delta, s_h) = self.deposits(counts);
        let hh = self.part.time_bins;
        let alpha = self.spec.alpha;
        let mut potentials = Vec::with_capacity(state.potentials.len());
        let mut level_index = Vec::with_capacity(state.potentials.len());
        for (i, &y) in state.potentials.iter().enumerate() {
            let m = self.site_square[i];
            let lam = self.tables.lambda[m];
            match spike_bin[i] {
                None => {
                    potentials.push(relax(self.part.delta, alpha, lam, ybar[m], y) + s_delta[m]);
                    level_index.push(state.level_index[i] + hh);
                }
                Some(h) => {
                    let t = (h as f64 - 1.0) * self.part.tau;
                    potentials.push(relax(t, alpha, lam, ybar[m], 0.0) + s_h[m][h]);
                    level_index.push(h - 1);
                }
            }
        }
        AuxState { potentials, level_index, step: state.step + 1 }
    }

    /// One macro step: draw each neuron's exponential spike time at its
    /// frozen per-square rate, bin it, and apply the update rules.
    pub fn aux_step(&self, state: &AuxState, seed: u64) -> AuxState {
        let mut rng = stream_rng(seed, &[u64::from_le_bytes(*b"aux-step"), state.step as u64]);
        let mm = self.part.square_count();
        let ybar = self.square_averages(&state.potentials);
        let mut counts = vec![vec![0u64; self.part.time_bins]; mm];
        let mut spike_bin = vec![None; state.potentials.len()];
        for (i, &y) in state.potentials.iter().enumerate() {
            let m = self.site_square[i];
            let xi = exp_time(&mut rng, self.rate_at_center(y, m));
            if xi < self.part.delta {
                let h = self.part.time_bin_of_elapsed(xi);
                spike_bin[i] = Some(h);
                counts[m][h - 1] += 1;
            }
        }
        self.advance(state, &spike_bin, &ybar, &counts)
    }
}

/// Auxiliary configuration: per-site potentials plus the ledger index each
/// site's potential currently occupies (new levels take indices `0..H-1`,
/// survivors shift by `H = δ/τ` each step).
#[derive(Debug, Clone)]
pub struct AuxState {
    pub potentials: Vec<f64>,
    pub level_index: Vec<usize>,
    pub step: usize,
}

/// Snap initial potentials to the centers of their potential bins.
pub fn bin_initial(u0: &[f64], part: &PartitionSpec) -> Result<AuxState, PartitionError> {
    let mut potentials = Vec::with_capacity(u0.len());
    let mut level_index = Vec::with_capacity(u0.len());
    for &u in u0 {
        let k = part.pot_bin_of(u)?;
        potentials.push(part.level_center(k));
        level_index.push(k - 1);
    }
    Ok(AuxState { potentials, level_index, step: 0 })
}

// ---------------------------------------------------------------------------
// Coupling
// ---------------------------------------------------------------------------

/// Good/bad labels and the running synchronization gap.
///
/// `theta` is the running maximum over steps of the per-step good-set
/// maximum of `|U_i - Y_i|`; it dominates the gap restricted to the final
/// good set (the good set only shrinks), so bounds checked against it are
/// conservative, and it is nondecreasing by construction.
#[derive(Debug, Clone)]
pub struct CouplingLedger {
    pub good: Vec<bool>,
    pub theta: f64,
    pub step: usize,
    pub history: Vec<CoupleStepRecord>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoupleStepRecord {
    pub step: usize,
    pub theta: f64,
    pub bad_count: usize,
    /// Spikes of the true process during this macro step.
    pub true_spikes: usize,
    /// Spikes of the auxiliary process during this macro step.
    pub aux_spikes: usize,
    /// Split-clock events (one side spiked alone before any joint spike).
    pub split_spikes: usize,
}

impl CouplingLedger {
    pub fn new(sites: usize) -> Self {
        CouplingLedger { good: vec![true; sites], theta: 0.0, step: 0, history: Vec::new() }
    }

    pub fn bad_count(&self) -> usize {
        self.good.iter().filter(|g| !**g).count()
    }
}

/// One coupled macro step of the true and auxiliary processes.
///
/// Each live neuron carries competing clocks: a joint clock at the minimum of
/// the two instantaneous rates, a split clock at their absolute difference,
/// and, once the auxiliary spike is consumed, the full true-process clock.
/// The time-varying intensities along the true flow are realized exactly by
/// thinning against the global bound `N φ*`; the acceptance uniform is
/// subdivided so the three clocks stay mutually exclusive. The true state
/// flows continuously; the auxiliary side only records (bin, count)
/// bookkeeping and is advanced in one shot when the residual time runs out.
pub fn coupled_step(
    sys: &AuxSystem,
    u_state: &mut NetworkState,
    y_state: &mut AuxState,
    ledger: &mut CouplingLedger,
    seed: u64,
    substep: f64,
) -> Result<(), AuxError> {
    let n = sys.spec.site_count();
    if u_state.potentials.len() != n || y_state.potentials.len() != n {
        return Err(AuxError::SizeMismatch { got: u_state.potentials.len(), want: n });
    }
    let delta = sys.part.delta;
    let expected_clock = ledger.step as f64 * delta;
    if (u_state.clock - expected_clock).abs() > 1e-9 * (1.0 + expected_clock) {
        return Err(AuxError::ClockMismatch {
            clock: u_state.clock,
            step: ledger.step,
            delta,
        });
    }
    let mut rng = stream_rng(seed, &[u64::from_le_bytes(*b"couple.."), ledger.step as u64]);
    let phi_star = sys.spec.rate.sup_bound;
    let total_rate = phi_star * n as f64;
    let ybar = sys.square_averages(&y_state.potentials);

    let mut q = vec![false; n];
    let mut beta = vec![0usize; n];
    let mut fired_joint = vec![false; n];
    let mut fired_split = vec![false; n];
    let mut fired_extra = vec![false; n];
    let mut counts = vec![vec![0u64; sys.part.time_bins]; sys.part.square_count()];
    let mut true_spikes = 0usize;
    let mut split_spikes = 0usize;

    let mut elapsed = 0.0;
    loop {
        let gap = exp_time(&mut rng, total_rate);
        if elapsed + gap >= delta {
            microsim::flow(sys.spec, u_state, delta - elapsed, substep);
            break;
        }
        microsim::flow(sys.spec, u_state, gap, substep);
        elapsed += gap;
        let site = rng.random_range(0..n);
        let accept: f64 = rng.random();
        let m = sys.site_square[site];
        let rate_true = sys.spec.rate.evaluate(u_state.potentials[site], sys.spec.mesh.site(site));
        let rate_aux = sys.rate_at_center(y_state.potentials[site], m);
        if !q[site] {
            let c_joint = rate_true.min(rate_aux) / phi_star;
            let c_split = (rate_true - rate_aux).abs() / phi_star;
            if accept < c_joint {
                // both processes spike
                fired_joint[site] = true;
                q[site] = true;
                let h = sys.part.time_bin_of_elapsed(elapsed);
                beta[site] = h;
                counts[m][h - 1] += 1;
                microsim::apply_spike(sys.spec, u_state, site);
                true_spikes += 1;
            } else if accept < c_joint + c_split {
                fired_split[site] = true;
                split_spikes += 1;
                if rate_true > rate_aux {
                    // the true process alone spikes
                    microsim::apply_spike(sys.spec, u_state, site);
                    true_spikes += 1;
                } else {
                    // the auxiliary alone spikes
                    q[site] = true;
                    let h = sys.part.time_bin_of_elapsed(elapsed);
                    beta[site] = h;
                    counts[m][h - 1] += 1;
                }
            }
        } else if accept * phi_star < rate_true {
            // auxiliary spike already consumed; true process keeps spiking
            fired_extra[site] = true;
            microsim::apply_spike(sys.spec, u_state, site);
            true_spikes += 1;
        }
    }

    // stop situation: apply the auxiliary bookkeeping in one shot
    let spike_bin: Vec<Option<usize>> =
        (0..n).map(|i| if q[i] { Some(beta[i]) } else { None }).collect();
    let aux_spikes = q.iter().filter(|b| **b).count();
    *y_state = sys.advance(y_state, &spike_bin, &ybar, &counts);

    // labels: good survives a step iff the split clock never rang and the
    // joint clock was not followed by an extra true spike
    let mut step_gap: f64 = 0.0;
    for i in 0..n {
        if ledger.good[i] && (fired_split[i] || (fired_joint[i] && fired_extra[i])) {
            ledger.good[i] = false;
        }
        if ledger.good[i] {
            step_gap = step_gap.max((u_state.potentials[i] - y_state.potentials[i]).abs());
        }
    }
    ledger.theta = ledger.theta.max(step_gap);
    ledger.step += 1;
    ledger.history.push(CoupleStepRecord {
        step: ledger.step,
        theta: ledger.theta,
        bad_count: ledger.bad_count(),
        true_spikes,
        aux_spikes,
        split_spikes,
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// One coupled run reduced to its per-step diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct CoupleRunSummary {
    pub delta: f64,
    pub epsilon: f64,
    pub theta_by_step: Vec<f64>,
    /// `ε² |B_n|` per step.
    pub bad_mass_by_step: Vec<f64>,
}

impl CoupleRunSummary {
    pub fn from_ledger(ledger: &CouplingLedger, delta: f64, epsilon: f64) -> Self {
        let e2 = epsilon * epsilon;
        CoupleRunSummary {
            delta,
            epsilon,
            theta_by_step: ledger.history.iter().map(|r| r.theta).collect(),
            bad_mass_by_step: ledger.history.iter().map(|r| r.bad_count as f64 * e2).collect(),
        }
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_by_step.iter().cloned().fold(0.0, f64::max)
    }

    pub fn bad_mass_max(&self) -> f64 {
        self.bad_mass_by_step.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaAggregate {
    pub delta: f64,
    pub replicas: usize,
    pub theta_max_mean: f64,
    pub theta_max_stderr: f64,
    pub bad_mass_max_mean: f64,
    pub bad_mass_max_stderr: f64,
}

/// Aggregates of a δ-sweep of coupled runs plus fitted log-log slopes of the
/// step maxima against δ (slopes need at least three δ values).
#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub per_delta: Vec<DeltaAggregate>,
    pub theta_slope: Option<f64>,
    pub bad_mass_slope: Option<f64>,
}

pub fn coupling_report(runs: &[CoupleRunSummary]) -> CouplingReport {
    let mut deltas: Vec<f64> = runs.iter().map(|r| r.delta).collect();
    deltas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    deltas.dedup();
    let mut per_delta = Vec::new();
    for &d in &deltas {
        let thetas: Vec<f64> =
            runs.iter().filter(|r| r.delta == d).map(|r| r.theta_max()).collect();
        let bads: Vec<f64> =
            runs.iter().filter(|r| r.delta == d).map(|r| r.bad_mass_max()).collect();
        let (tm, ts) = crate::stats::mean_stderr(&thetas);
        let (bm, bs) = crate::stats::mean_stderr(&bads);
        per_delta.push(DeltaAggregate {
            delta: d,
            replicas: thetas.len(),
            theta_max_mean: tm,
            theta_max_stderr: ts,
            bad_mass_max_mean: bm,
            bad_mass_max_stderr: bs,
        });
    }
    let slope = |key: fn(&DeltaAggregate) -> f64| {
        if per_delta.len() >= 3 && per_delta.iter().all(|a| key(a) > 0.0) {
            let x: Vec<f64> = per_delta.iter().map(|a| a.delta.ln()).collect();
            let y: Vec<f64> = per_delta.iter().map(|a| key(a).ln()).collect();
            Some(crate::stats::ols_slope(&x, &y))
        } else {
            None
        }
    };
    CouplingReport {
        theta_slope: slope(|a| a.theta_max_mean),
        bad_mass_slope: slope(|a| a.bad_mass_max_mean),
        per_delta,
    }
}
