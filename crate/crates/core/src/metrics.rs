//! Distances between empirical and limit objects, Monte-Carlo oracles, and
//! the convergence-study driver.

use rayon::prelude::*;
use serde::Serialize;

use crate::limit::{characteristic_flow, CharacteristicPaths, DensityField, Trajectory};
use crate::microsim::{self, EmpiricalMeasure, SimResult};
use crate::model::{sample_initial_state, ModelSpec, Psi0Sampler};
use crate::rng::{exp_time, stream_rng, tag_f64};
use rand::Rng;
use crate::stats;

// ---------------------------------------------------------------------------
// Bounded-Lipschitz test library
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum UFactor {
    One,
    Ramp,
    Sin { k: f64 },
    Cos { k: f64 },
    Hat { center: f64, halfwidth: f64 },
    ExpNeg { rate: f64 },
}

impl UFactor {
    fn eval(&self, u: f64) -> f64 {
        match *self {
            UFactor::One => 1.0,
            UFactor::Ramp => u,
            UFactor::Sin { k } => (k * u).sin(),
            UFactor::Cos { k } => (k * u).cos(),
            UFactor::Hat { center, halfwidth } => {
                (1.0 - (u - center).abs() / halfwidth).max(0.0)
            }
            UFactor::ExpNeg { rate } => (-rate * u).exp(),
        }
    }

    fn sup(&self, umax: f64) -> f64 {
        match *self {
            UFactor::Ramp => umax,
            _ => 1.0,
        }
    }

    fn lipschitz(&self) -> f64 {
        match *self {
            UFactor::One => 0.0,
            UFactor::Ramp => 1.0,
            UFactor::Sin { k } | UFactor::Cos { k } => k.abs(),
            UFactor::Hat { halfwidth, .. } => 1.0 / halfwidth,
            UFactor::ExpNeg { rate } => rate,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RFactor {
    One,
    CosX,
    CosY,
    SinXSinY,
}

const TAU: f64 = 2.0 * std::f64::consts::PI;

impl RFactor {
    fn eval(&self, r: (f64, f64)) -> f64 {
        match self {
            RFactor::One => 1.0,
            RFactor::CosX => (TAU * r.0).cos(),
            RFactor::CosY => (TAU * r.1).cos(),
            RFactor::SinXSinY => (TAU * r.0).sin() * (TAU * r.1).sin(),
        }
    }

    fn lipschitz(&self) -> f64 {
        match self {
            RFactor::One => 0.0,
            RFactor::CosX | RFactor::CosY => TAU,
            RFactor::SinXSinY => TAU * std::f64::consts::SQRT_2,
        }
    }

    /// Exact integral over the square `[x0, x0+ell] × [y0, y0+ell]`.
    fn integral_over(&self, x0: f64, y0: f64, ell: f64) -> f64 {
        let int_cos = |a: f64| ((TAU * (a + ell)).sin() - (TAU * a).sin()) / TAU;
        let int_sin = |a: f64| ((TAU * a).cos() - (TAU * (a + ell)).cos()) / TAU;
        match self {
            RFactor::One => ell * ell,
            RFactor::CosX => int_cos(x0) * ell,
            RFactor::CosY => int_cos(y0) * ell,
            RFactor::SinXSinY => int_sin(x0) * int_sin(y0),
        }
    }
}

/// One tensor-product test function, scaled to bounded-Lipschitz norm at
/// most one.
#[derive(Debug, Clone, Copy)]
pub struct BlTestFn {
    pub u: UFactor,
    pub r: RFactor,
    pub inv_norm: f64,
}

impl BlTestFn {
    fn new(u: UFactor, r: RFactor, umax: f64) -> Self {
        let sup = u.sup(umax); // r factors are bounded by 1
        let lip = u.lipschitz() + sup * r.lipschitz();
        BlTestFn { u, r, inv_norm: 1.0 / (sup + lip) }
    }

    pub fn eval(&self, u: f64, r: (f64, f64)) -> f64 {
        self.inv_norm * self.u.eval(u) * self.r.eval(r)
    }
}

/// The fixed 32-function library on `[0, umax] × [0,1)²`: eight potential
/// profiles crossed with four periodic position profiles.
pub fn bl_library(umax: f64) -> Vec<BlTestFn> {
    let pi = std::f64::consts::PI;
    let u_factors = [
        UFactor::One,
        UFactor::Ramp,
        UFactor::Sin { k: pi / umax },
        UFactor::Cos { k: pi / umax },
        UFactor::Sin { k: 2.0 * pi / umax },
        UFactor::Hat { center: 0.25 * umax, halfwidth: 0.25 * umax },
        UFactor::Hat { center: 0.5 * umax, halfwidth: 0.25 * umax },
        UFactor::ExpNeg { rate: 3.0 / umax },
    ];
    let r_factors = [RFactor::One, RFactor::CosX, RFactor::CosY, RFactor::SinXSinY];
    let mut lib = Vec::with_capacity(32);
    for &uf in &u_factors {
        for &rf in &r_factors {
            lib.push(BlTestFn::new(uf, rf, umax));
        }
    }
    lib
}

/// Anything a bounded-Lipschitz test function can be paired with.
pub trait Pairable {
    fn pair_bl(&self, f: &BlTestFn) -> f64;
}

impl Pairable for EmpiricalMeasure {
    fn pair_bl(&self, f: &BlTestFn) -> f64 {
        microsim::pair(self, |u, r| f.eval(u, r))
    }
}

impl Pairable for DensityField {
    /// Separable pairing: the u-integral runs on each square's section, the
    /// position factor is integrated exactly over the square.
    fn pair_bl(&self, f: &BlTestFn) -> f64 {
        let mut total = 0.0;
        for row in 0..self.side {
            for col in 0..self.side {
                let at = &self.per_r[row * self.side + col];
                let u_int = at.moment(|u| f.u.eval(u));
                let r_int =
                    f.r.integral_over(col as f64 * self.ell, row as f64 * self.ell, self.ell);
                total += u_int * r_int;
            }
        }
        f.inv_norm * total
    }
}

/// Max pairing gap over the library.
pub fn bl_distance(a: &dyn Pairable, b: &dyn Pairable, lib: &[BlTestFn]) -> f64 {
    lib.iter()
        .map(|f| (a.pair_bl(f) - b.pair_bl(f)).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// One-particle oracle
// ---------------------------------------------------------------------------

/// Simulate independent one-dimensional jump processes with the
/// time-dependent drift the solved scalars induce (flowed exactly along the
/// characteristics), jump rate `φ(u, r)` realized by thinning, and reset to
/// zero; returns the potentials at each requested time.
pub fn one_particle_oracle(
    paths: &CharacteristicPaths,
    spec: &ModelSpec,
    m: usize,
    r: (f64, f64),
    replicas: usize,
    seed: u64,
    times: &[f64],
) -> Vec<Vec<f64>> {
    let mut obs: Vec<f64> = times.to_vec();
    obs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let phi_star = spec.rate.sup_bound;
    let sampler = Psi0Sampler::new(&spec.psi0, r);
    let samples: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, &[u64::from_le_bytes(*b"oneparti"), k]);
            let mut u = sampler.draw(&mut rng);
            let mut t = 0.0;
            let mut out = Vec::with_capacity(obs.len());
            let mut next_obs = 0usize;
            loop {
                let gap = exp_time(&mut rng, phi_star);
                let candidate = t + gap;
                while next_obs < obs.len() && obs[next_obs] <= candidate {
                    out.push(characteristic_flow(paths, m, t, obs[next_obs], u));
                    next_obs += 1;
                }
                if next_obs >= obs.len() {
                    break;
                }
                u = characteristic_flow(paths, m, t, candidate, u);
                t = candidate;
                let accept: f64 = rng.random();
                if accept * phi_star < spec.rate.evaluate(u, r) {
                    u = 0.0;
                }
            }
            out
        })
        .collect();
    let mut per_time = vec![Vec::with_capacity(replicas); obs.len()];
    for s in samples {
        for (i, u) in s.into_iter().enumerate() {
            per_time[i].push(u);
        }
    }
    per_time
}

/// L¹ distance between the empirical law of `samples` and a density section,
/// on a uniform bin grid over `[0, hi]`.
pub fn l1_histogram_distance(
    samples: &[f64],
    section: &crate::limit::FieldAt,
    bins: usize,
    hi: f64,
) -> f64 {
    let n = samples.len() as f64;
    let w = hi / bins as f64;
    let mut hist = vec![0.0; bins + 1];
    for &u in samples {
        let b = ((u / w).floor() as usize).min(bins);
        hist[b] += 1.0 / n;
    }
    let mut d = 0.0;
    for (b, h) in hist.iter().enumerate().take(bins) {
        let lo = b as f64 * w;
        d += (h - section.mass_between(lo, lo + w)).abs();
    }
    // overflow bin: everything the grid missed
    d + (hist[bins] - section.mass_between(hi, 1e12)).abs()
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub epsilon: f64,
    pub replicas: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub times: Vec<f64>,
    pub cells: Vec<CellReport>,
    /// Per observation time: fitted log-log slope of the mean distance
    /// against ε; absent with fewer than three cells.
    pub slopes: Vec<Option<f64>>,
    pub root_seed: u64,
}

/// For each mesh scale, run independent trajectories and measure the
/// bounded-Lipschitz distance of the empirical measure to the solved field
/// at the observation times. Cells aggregate in decreasing-ε order whatever
/// the input order; replica streams depend only on (ε, replica), so the
/// report is invariant under permutations of the input list.
pub fn convergence_study(
    specs: &[ModelSpec],
    solved: &Trajectory,
    times: &[f64],
    replicas: usize,
    root_seed: u64,
) -> ConvergenceReport {
    let horizon = times.iter().cloned().fold(0.0, f64::max);
    let umax = specs
        .iter()
        .map(|s| s.psi0.support_bound + horizon * s.rate.sup_bound * s.syn_sup())
        .fold(1.0f64, f64::max);
    let lib = bl_library(umax);
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| specs[b].mesh.epsilon.partial_cmp(&specs[a].mesh.epsilon).unwrap());
    let fields: Vec<&DensityField> = times
        .iter()
        .map(|&t| solved.field_at(t).expect("observation times sit on the step grid"))
        .collect();
    let mut cells = Vec::new();
    for &idx in &order {
        let spec = &specs[idx];
        let eps = spec.mesh.epsilon;
        let substep = spec.default_substep();
        let t0 = std::time::Instant::now();
        let dists: Vec<Vec<f64>> = (0..replicas as u64)
            .into_par_iter()
            .map(|k| {
                let seed = crate::rng::mix(crate::rng::mix(root_seed, tag_f64(eps)), k);
                let init = sample_initial_state(spec, seed);
                let res = microsim::simulate(spec, init, horizon, seed, substep, times)
                    .expect("positive horizon");
                res.snapshots
                    .iter()
                    .zip(&fields)
                    .map(|((_, pots), field)| {
                        let mu = microsim::empirical_measure(spec, pots);
                        bl_distance(&mu, *field, &lib)
                    })
                    .collect()
            })
            .collect();
        let mut mean = Vec::with_capacity(times.len());
        let mut stderr = Vec::with_capacity(times.len());
        for ti in 0..times.len() {
            let xs: Vec<f64> = dists.iter().map(|d| d[ti]).collect();
            let (m, s) = stats::mean_stderr(&xs);
            mean.push(m);
            stderr.push(s);
        }
        cells.push(CellReport {
            epsilon: eps,
            replicas,
            mean,
            stderr,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let slopes = (0..times.len())
        .map(|ti| {
            if cells.len() >= 3 && cells.iter().all(|c| c.mean[ti] > 0.0) {
                let x: Vec<f64> = cells.iter().map(|c| c.epsilon.ln()).collect();
                let y: Vec<f64> = cells.iter().map(|c| c.mean[ti].ln()).collect();
                Some(stats::ols_slope(&x, &y))
            } else {
                None
            }
        })
        .collect();
    ConvergenceReport { times: times.to_vec(), cells, slopes, root_seed }
}

// ---------------------------------------------------------------------------
// Path-bound audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub replicas: usize,
    /// `sup_t ‖U‖ ≤ ‖U(0)‖ + a* ε² N(T)` per replica; this is a theorem
    /// along every path, so any violation is an implementation bug.
    pub deterministic_bound_ok: bool,
    pub deterministic_margin_min: f64,
    /// Fraction of replicas whose total count exceeds `2 φ* ε⁻² T`.
    pub count_violation_fraction: f64,
    /// Fraction of δ-windows (over all replicas) with more than
    /// `2 φ* ε⁻² δ` spikes.
    pub window_violation_fraction: f64,
    pub window: f64,
}

pub fn bound_audit(
    results: &[(f64, SimResult)], // (initial sup norm, trajectory)
    spec: &ModelSpec,
    horizon: f64,
    window: f64,
) -> AuditReport {
    let eps2 = spec.mesh.epsilon * spec.mesh.epsilon;
    let a_star = spec.syn_sup();
    let phi_star = spec.rate.sup_bound;
    let mut ok = true;
    let mut margin = f64::INFINITY;
    let mut count_viol = 0usize;
    let mut window_viol = 0usize;
    let mut window_total = 0usize;
    let windows = (horizon / window).round() as usize;
    let window_cap = 2.0 * phi_star * window / eps2;
    for (u0, res) in results {
        let bound = u0 + a_star * eps2 * res.log.len() as f64;
        let m = bound - res.sup_norm;
        margin = margin.min(m);
        if m < -1e-12 {
            ok = false;
        }
        if res.log.len() as f64 > 2.0 * phi_star * horizon / eps2 {
            count_viol += 1;
        }
        let mut counts = vec![0usize; windows];
        for e in &res.log {
            let w = ((e.time / window).floor() as usize).min(windows - 1);
            counts[w] += 1;
        }
        for c in counts {
            window_total += 1;
            if c as f64 > window_cap {
                window_viol += 1;
            }
        }
    }
    AuditReport {
        replicas: results.len(),
        deterministic_bound_ok: ok,
        deterministic_margin_min: margin,
        count_violation_fraction: count_viol as f64 / results.len() as f64,
        window_violation_fraction: window_viol as f64 / window_total.max(1) as f64,
        window,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::LimitGrid;
    use crate::model::testutil::small_spec;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn library_has_32_normalized_entries() {
        let lib = bl_library(2.0);
        assert_eq!(lib.len(), 32);
        // sampled bounded-Lipschitz check
        let mut rng = stream_rng(1, &[]);
        for f in &lib {
            for _ in 0..200 {
                let u1: f64 = rng.random::<f64>() * 2.0;
                let u2: f64 = rng.random::<f64>() * 2.0;
                let r1 = (rng.random::<f64>(), rng.random::<f64>());
                let r2 = (rng.random::<f64>(), rng.random::<f64>());
                let v1 = f.eval(u1, r1);
                assert!(v1.abs() <= 1.0 + 1e-12);
                let dist = ((u1 - u2).powi(2)
                    + (r1.0 - r2.0).powi(2)
                    + (r1.1 - r2.1).powi(2))
                .sqrt();
                assert!(
                    (v1 - f.eval(u2, r2)).abs() <= dist + 1e-9,
                    "library entry is not 1-Lipschitz"
                );
            }
        }
    }

    #[test]
    fn bl_distance_identical_point_sets_is_zero() {
        let spec = small_spec(0.2);
        let st = crate::model::sample_initial_state(&spec, 5);
        let mu = microsim::empirical_measure(&spec, &st.potentials);
        let lib = bl_library(2.0);
        assert_eq!(bl_distance(&mu, &mu, &lib), 0.0);
    }

    #[test]
    fn bl_distance_is_a_pseudometric_on_samples() {
        let spec = small_spec(0.2);
        let lib = bl_library(2.0);
        let mus: Vec<EmpiricalMeasure> = (0..3)
            .map(|s| {
                let st = crate::model::sample_initial_state(&spec, 40 + s);
                microsim::empirical_measure(&spec, &st.potentials)
            })
            .collect();
        let d = |a: usize, b: usize| bl_distance(&mus[a], &mus[b], &lib);
        assert!((d(0, 1) - d(1, 0)).abs() < 1e-15);
        assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    }

    #[test]
    fn bl_distance_detects_shifts_and_sampling_noise_scale() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.2).unwrap();
        let field = crate::limit::DensityField::from_initial(&spec, &grid, 513);
        let lib = bl_library(2.0);
        // iid draws from the field's own law (uniform on [0,1] per site)
        let mut rng = stream_rng(7, &[]);
        let n = 10_000usize;
        let side = 100; // 100x100 virtual sites for positions
        let points: Vec<(f64, f64, f64)> = (0..n)
            .map(|i| {
                let u: f64 = rng.random();
                let (x, y) = ((i % side) as f64 / side as f64, (i / side) as f64 / side as f64);
                (u, x, y)
            })
            .collect();
        let mu = EmpiricalMeasure { points: points.clone(), weight: 1.0 / n as f64 };
        let d = bl_distance(&mu, &field, &lib);
        assert!(d <= 3.0 / (n as f64).sqrt() + 5e-3, "sampling distance {d}");
        // shifting every potential by 0.2 must register at least ~linearly
        let shifted = EmpiricalMeasure {
            points: points.iter().map(|&(u, x, y)| (u + 0.2, x, y)).collect(),
            weight: 1.0 / n as f64,
        };
        let d2 = bl_distance(&shifted, &field, &lib);
        // the scaled first-moment probe alone sees shift/norm
        let ramp_norm = 2.0 + 1.0; // sup + Lip of the ramp factor on [0,2]
        assert!(d2 >= 0.2 / ramp_norm - 0.01, "shift distance {d2}");
    }

    #[test]
    fn oracle_with_zero_rate_is_the_deterministic_flow() {
        let mut spec = small_spec(0.1);
        spec.rate.clamp_level = 0.0;
        spec.rate.sup_bound = 0.0;
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let f0 = crate::limit::DensityField::from_initial(&spec, &grid, 129);
        let sol = crate::limit::solve_pde(&f0, &grid, &spec.rate, 0.5, 0.125, 2, 4).unwrap();
        let paths = CharacteristicPaths::from_trajectory(sol.finest(), &grid);
        // narrow start: empirical spread stays within the initial width
        let mut spec2 = spec.clone();
        spec2.psi0 = crate::model::InitialDensity::new(crate::model::Psi0Preset::Narrow {
            center: 0.8,
            width: 0.01,
        });
        let per_time = one_particle_oracle(&paths, &spec2, 0, grid.centers[0], 500, 3, &[0.5]);
        let us = &per_time[0];
        let spread = us.iter().cloned().fold(0.0f64, f64::max)
            - us.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 0.011, "deterministic flow should not spread: {spread}");
    }

    #[test]
    fn histogram_distance_of_matching_law_is_small() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.2).unwrap();
        let field = crate::limit::DensityField::from_initial(&spec, &grid, 513);
        let mut rng = stream_rng(11, &[]);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let d = l1_histogram_distance(&samples, &field.per_r[0], 32, 1.0);
        assert!(d < 0.02, "histogram distance {d}");
    }

    #[test]
    fn audit_accepts_valid_runs() {
        let spec = small_spec(0.2);
        let results: Vec<(f64, SimResult)> = (0..20)
            .map(|k| {
                let init = sample_initial_state(&spec, k);
                let u0 = init.max_potential();
                (u0, microsim::simulate(&spec, init, 1.0, 100 + k, 0.01, &[]).unwrap())
            })
            .collect();
        let report = bound_audit(&results, &spec, 1.0, 0.25);
        assert!(report.deterministic_bound_ok);
        assert!(report.deterministic_margin_min >= -1e-12);
        assert!(report.count_violation_fraction <= 0.2);
    }
}
