//! Exact event-driven simulation of the microscopic network.
//!
//! Between spikes every potential follows the linear averaging/leak flow;
//! spike times are sampled by thinning against the constant dominating rate
//! `N φ*` (valid because the rate is bounded by `φ*` everywhere), with the
//! fixed draw order (candidate gap, site index, acceptance uniform) per
//! proposal. A trajectory is bit-reproducible for a fixed seed.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::ModelSpec;
use crate::rng::{exp_time, stream_rng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dense flow is guarded to {max} sites, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
}

/// Full refresh period for the incrementally maintained local averages.
const AVG_REFRESH_EVERY: usize = 1000;

/// One spike: when, who, and the membrane potential consumed by the reset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEvent {
    pub time: f64,
    pub site: usize,
    pub pre_potential: f64,
}

pub type EventLog = Vec<SpikeEvent>;

/// Membrane potentials plus the simulation clock and the cached local
/// averages `Ū_i = ε² Σ_j b(i,j) U_j`.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub potentials: Vec<f64>,
    pub clock: f64,
    pub local_averages: Vec<f64>,
}

impl NetworkState {
    pub fn new(potentials: Vec<f64>, spec: &ModelSpec) -> Self {
        let mut s = NetworkState { potentials, clock: 0.0, local_averages: Vec::new() };
        s.refresh_averages(spec);
        s
    }

    /// Recompute the cached averages from scratch.
    pub fn refresh_averages(&mut self, spec: &ModelSpec) {
        let n = self.potentials.len();
        let eps2 = spec.mesh.epsilon * spec.mesh.epsilon;
        self.local_averages = (0..n)
            .map(|i| {
                let row = &spec.gap[i * n..(i + 1) * n];
                eps2 * row.iter().zip(&self.potentials).map(|(b, u)| b * u).sum::<f64>()
            })
            .collect();
    }

    pub fn max_potential(&self) -> f64 {
        self.potentials.iter().cloned().fold(0.0, f64::max)
    }
}

/// Advance the averaging/leak flow by `dt` using frozen-average substeps: on
/// each substep of length `h` the averages are held fixed and every potential
/// gets the exact scalar relaxation
/// `U_i ← e^{-(α+λ_i)h} U_i + λ_i/(α+λ_i) (1-e^{-(α+λ_i)h}) Ū_i`,
/// then the averages are recomputed.
pub fn flow(spec: &ModelSpec, state: &mut NetworkState, dt: f64, substep: f64) {
    if dt <= 0.0 {
        return;
    }
    let nsub = (dt / substep).ceil().max(1.0) as usize;
    let h = dt / nsub as f64;
    for _ in 0..nsub {
        for i in 0..state.potentials.len() {
            let rate = spec.alpha + spec.lambda[i];
            let decay = (-rate * h).exp();
            let pull = if spec.lambda[i] > 0.0 {
                spec.lambda[i] / rate * (1.0 - decay) * state.local_averages[i]
            } else {
                0.0
            };
            state.potentials[i] = decay * state.potentials[i] + pull;
        }
        state.refresh_averages(spec);
    }
    state.clock += dt;
}

/// Dense-matrix propagation `U(t+dt) = e^{A dt} U(t)` with
/// `A_{ij} = ε² λ_i b(i,j)` off the diagonal and `A_{ii} = -α-λ_i`; the
/// oracle for [`flow`]. Guarded to small systems.
pub fn exact_flow(spec: &ModelSpec, state: &mut NetworkState, dt: f64) -> Result<(), SimError> {
    let n = spec.site_count();
    if n > crate::model::MAX_SITES {
        return Err(SimError::TooLarge { n, max: crate::model::MAX_SITES });
    }
    state.potentials = propagate_dense(
        &state.potentials,
        spec.alpha,
        &spec.lambda,
        &spec.gap,
        spec.mesh.epsilon,
        dt,
    );
    state.clock += dt;
    state.refresh_averages(spec);
    Ok(())
}

/// Matrix-exponential propagation for an explicit (possibly synthetic)
/// system. `gap` is the normalized kernel, row-major.
pub fn propagate_dense(
    potentials: &[f64],
    alpha: f64,
    lambda: &[f64],
    gap: &[f64],
    epsilon: f64,
    dt: f64,
) -> Vec<f64> {
    let n = potentials.len();
    let eps2 = epsilon * epsilon;
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -alpha - lambda[i]
        } else {
            eps2 * lambda[i] * gap[i * n + j]
        }
    });
    let eig = a.symmetric_eigen();
    let u = DVector::from_column_slice(potentials);
    let coords = eig.eigenvectors.transpose() * u;
    let scaled = DVector::from_fn(n, |k, _| coords[k] * (eig.eigenvalues[k] * dt).exp());
    let out = &eig.eigenvectors * scaled;
    out.iter().cloned().collect()
}

/// Apply one spike at `site`: reset it to zero and add `ε² a(site, j)` to
/// every other potential, keeping the cached averages consistent.
pub(crate) fn apply_spike(spec: &ModelSpec, state: &mut NetworkState, site: usize) {
    let n = state.potentials.len();
    let eps2 = spec.mesh.epsilon * spec.mesh.epsilon;
    let u_pre = state.potentials[site];
    state.potentials[site] = 0.0;
    let syn_row = &spec.syn[site * n..(site + 1) * n];
    for j in 0..n {
        if j != site {
            state.potentials[j] += eps2 * syn_row[j];
        }
    }
    for k in 0..n {
        let gap_row = &spec.gap[k * n..(k + 1) * n];
        let mut d = gap_row[site] * (-u_pre);
        let mut dep = 0.0;
        for j in 0..n {
            if j != site {
                dep += gap_row[j] * syn_row[j];
            }
        }
        d += eps2 * dep;
        state.local_averages[k] += eps2 * d;
    }
}

/// Result of one trajectory.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub state: NetworkState,
    pub log: EventLog,
    /// Running maximum of `‖U(t)‖` over the whole trajectory (the flow never
    /// increases the maximum, so checking after each jump suffices).
    pub sup_norm: f64,
    /// Potentials recorded at the requested snapshot times.
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

/// Run the thinning loop to `horizon`. Proposals arrive at rate `N φ*`; each
/// proposal flows the state to the candidate time, picks a site uniformly and
/// accepts with probability `φ(U_i, r_i)/φ*`. A zero sup rate degenerates to
/// pure flow with an empty log.
pub fn simulate(
    spec: &ModelSpec,
    state: NetworkState,
    horizon: f64,
    seed: u64,
    substep: f64,
    snapshot_times: &[f64],
) -> Result<SimResult, SimError> {
    if !(horizon > 0.0) {
        return Err(SimError::BadHorizon(horizon));
    }
    let mut state = state;
    let n = spec.site_count();
    let phi_star = spec.rate.sup_bound;
    let total_rate = phi_star * n as f64;
    let t_end = state.clock + horizon;
    let mut rng = stream_rng(seed, &[u64::from_le_bytes(*b"simulate")]);
    let mut log = EventLog::new();
    let mut sup_norm = state.max_potential();
    let mut snaps: Vec<f64> = snapshot_times.to_vec();
    snaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut snapshots = Vec::new();
    let mut next_snap = 0usize;
    let mut events_since_refresh = 0usize;

    loop {
        let gap = exp_time(&mut rng, total_rate);
        let candidate = state.clock + gap;
        let target = candidate.min(t_end);
        while next_snap < snaps.len() && snaps[next_snap] <= target + 1e-15 {
            let t = snaps[next_snap];
            let dt = (t - state.clock).max(0.0);
            flow(spec, &mut state, dt, substep);
            snapshots.push((t, state.potentials.clone()));
            next_snap += 1;
        }
        if candidate > t_end {
            let dt = t_end - state.clock;
            flow(spec, &mut state, dt, substep);
            break;
        }
        let dt = candidate - state.clock;
        flow(spec, &mut state, dt, substep);
        let site = rng.random_range(0..n);
        let accept: f64 = rng.random();
        let rate = spec.rate.evaluate(state.potentials[site], spec.mesh.site(site));
        if accept * phi_star < rate {
            let pre = state.potentials[site];
            log.push(SpikeEvent { time: state.clock, site, pre_potential: pre });
            apply_spike(spec, &mut state, site);
            events_since_refresh += 1;
            if events_since_refresh >= AVG_REFRESH_EVERY {
                state.refresh_averages(spec);
                events_since_refresh = 0;
            }
            sup_norm = sup_norm.max(state.max_potential());
        }
    }
    Ok(SimResult { state, log, sup_norm, snapshots })
}

// ---------------------------------------------------------------------------
// Empirical measure
// ---------------------------------------------------------------------------

/// The summary record the `simulate` artifacts carry.
pub fn sample_summary(res: &SimResult, wall_seconds: f64) -> serde_json::Value {
    serde_json::json!({
        "schema_version": crate::runner::SCHEMA_VERSION,
        "spike_count": res.log.len(),
        "max_potential": res.sup_norm,
        "final_clock": res.state.clock,
        "wall_seconds": wall_seconds,
    })
}

/// Weighted point set `{(U_i, r_i)}`, each point of mass `ε²`.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub points: Vec<(f64, f64, f64)>,
    pub weight: f64,
}

/// Exact point-mass representation of the current configuration.
pub fn empirical_measure(spec: &ModelSpec, potentials: &[f64]) -> EmpiricalMeasure {
    let eps = spec.mesh.epsilon;
    EmpiricalMeasure {
        points: potentials
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let (x, y) = spec.mesh.site(i);
                (u, x, y)
            })
            .collect(),
        weight: eps * eps,
    }
}

/// Pair the measure with a test function: `ε² Σ_i f(U_i, r_i)`.
pub fn pair<F: Fn(f64, (f64, f64)) -> f64>(measure: &EmpiricalMeasure, f: F) -> f64 {
    measure.weight * measure.points.iter().map(|&(u, x, y)| f(u, (x, y))).sum::<f64>()
}
