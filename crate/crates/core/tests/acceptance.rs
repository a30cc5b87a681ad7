//! Acceptance suite: every exit criterion as one test, each printing a
//! pass/fail line with the measured quantities (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Tolerances are pinned here, next to the criterion they gate. The suite
//! is deterministic: every Monte-Carlo step derives its stream from the
//! fixed root seeds below.

use std::sync::OnceLock;

use hydroneuro::auxcouple::{bin_initial, coupled_step, AuxSystem, CoupleRunSummary, CouplingLedger};
use hydroneuro::config::ExperimentConfig;
use hydroneuro::limit::{
    characteristic_flow, closed_form_density, l1_distance_fields, ledger_init, ledger_step,
    ledger_vs_aux, solve_pde, weak_residual, CharacteristicPaths, Curve, DensityField, FieldAt,
    LimitGrid, PdeSolution, WeakTestFn,
};
use hydroneuro::metrics::{
    bl_library, bound_audit, convergence_study, l1_histogram_distance, one_particle_oracle,
};
use hydroneuro::microsim::{simulate, SimResult};
use hydroneuro::model::{sample_initial_state, ModelSpec};
use hydroneuro::partition::PartitionSpec;
use hydroneuro::rng::{mix, tag_f64};
use hydroneuro::stats;

const ROOT_SEED: u64 = 20260809;

// -------------------------------------------------------------------------
// shared fixtures
// -------------------------------------------------------------------------

/// Smooth spatially structured model: trigonometric kernels (equispaced
/// sums integrate them exactly), linear rate clamped at 2, uniform start.
fn spatial_toml(epsilon: f64, ell: f64) -> String {
    format!(
        r#"
        [model]
        epsilon = {epsilon}
        alpha = 0.2
        synaptic = {{ preset = "cosine", amplitude = 0.5, contrast = 0.4 }}
        gap = {{ preset = "cosine", amplitude = 1.0, contrast = 0.5 }}
        rate = {{ preset = "linear", clamp = 2.0 }}
        psi0 = {{ preset = "uniform", r0 = 1.0 }}

        [run]
        horizon = 1.0

        [pde]
        ell = {ell}
        delta_finest = 0.0078125
        delta_levels = 3
        ugrid = 513
        spike_nodes = 8
        "#
    )
}

/// Position-uniform model with constant kernels (the mean-field corner).
fn meanfield_toml(psi0: &str) -> String {
    format!(
        r#"
        [model]
        epsilon = 0.1
        alpha = 0.2
        synaptic = {{ preset = "constant", value = 0.5 }}
        gap = {{ preset = "constant", value = 1.0 }}
        rate = {{ preset = "linear", clamp = 2.0 }}
        psi0 = {psi0}

        [run]
        horizon = 1.0

        [pde]
        ell = 0.25
        delta_finest = 0.0078125
        delta_levels = 3
        ugrid = 513
        spike_nodes = 8
        "#
    )
}

struct Solved {
    spec: ModelSpec,
    grid: LimitGrid,
    sol: PdeSolution,
}

fn solve(toml: &str) -> Solved {
    let cfg = ExperimentConfig::from_str(toml).unwrap();
    let spec = cfg.build_model(None).unwrap();
    let grid = LimitGrid::new(&spec, cfg.pde.ell).unwrap();
    let f0 = DensityField::from_initial(&spec, &grid, cfg.pde.ugrid);
    let sol = solve_pde(
        &f0,
        &grid,
        &spec.rate,
        cfg.run.horizon,
        cfg.pde.delta_finest,
        cfg.pde.delta_levels,
        cfg.pde.spike_nodes,
    )
    .unwrap();
    Solved { spec, grid, sol }
}

fn spatial_solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solve(&spatial_toml(0.1, 0.25)))
}

fn meanfield_solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solve(&meanfield_toml(r#"{ preset = "uniform", r0 = 1.0 }"#)))
}

/// The 1e3-replica trajectory set at epsilon = 0.1 shared by the counting
/// and path-bound criteria.
fn replica_bank() -> &'static (ModelSpec, Vec<(f64, SimResult)>) {
    static CELL: OnceLock<(ModelSpec, Vec<(f64, SimResult)>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::from_str(&spatial_toml(0.1, 0.25)).unwrap();
        let spec = cfg.build_model(None).unwrap();
        let substep = spec.default_substep();
        use rayon::prelude::*;
        let results: Vec<(f64, SimResult)> = (0..1000u64)
            .into_par_iter()
            .map(|k| {
                let seed = mix(mix(ROOT_SEED, 0xba2b), k);
                let init = sample_initial_state(&spec, seed);
                let u0 = init.max_potential();
                (u0, simulate(&spec, init, 1.0, seed, substep, &[]).unwrap())
            })
            .collect();
        (spec, results)
    })
}

fn report(name: &str, pass: bool, detail: &str) {
    println!("criterion {name}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {name} failed: {detail}");
}

// -------------------------------------------------------------------------
// criteria
// -------------------------------------------------------------------------

#[test]
fn c01_mass_conservation_of_the_solved_density() {
    let s = spatial_solved();
    // the 2^-6 level: every step time is a dyadic point of that grid
    let level = &s.sol.levels[1];
    assert!((level.delta - 0.015625).abs() < 1e-12);
    let worst = level
        .fields
        .iter()
        .flat_map(|f| f.mass_defects())
        .fold(0.0f64, f64::max);
    report(
        "1 (mass conservation)",
        worst <= 1e-4,
        &format!("max |∫ρ du − 1| = {worst:.3e} over all squares and dyadic times (tol 1e-4)"),
    );
}

#[test]
fn c02_boundary_law() {
    let s = spatial_solved();
    let mut worst: f64 = 0.0;
    for &t in &[0.25, 0.5, 1.0] {
        for m in 0..s.grid.square_count() {
            let v = s.sol.boundary_value(m, t).unwrap();
            let ubar = s.sol.extrapolate(t, |f| f.per_r[m].ubar).unwrap();
            let p = s.sol.extrapolate(t, |f| f.per_r[m].p).unwrap();
            let q = s.sol.extrapolate(t, |f| f.per_r[m].q).unwrap();
            let law = q / (s.grid.lambda[m] * ubar + p);
            worst = worst.max((v - law).abs());
        }
    }
    report(
        "2 (boundary law)",
        worst <= 1e-3,
        &format!("max |ρ(0⁺) − q/(λū+p)| = {worst:.3e} on the 4x4 grid at t ∈ {{0.25, 0.5, 1}} (tol 1e-3)"),
    );
}

#[test]
fn c03_closed_form_cross_check() {
    let s = spatial_solved();
    let finest = s.sol.finest();
    let paths = CharacteristicPaths::from_trajectory(finest, &s.grid);
    let t = 1.0;
    let field = finest.field_at(t).unwrap();
    // sample the closed forms on each square, split at the shock
    let mut per_r = Vec::new();
    for m in 0..s.grid.square_count() {
        let ustar = paths.kernel_integral(m, 0.0, t);
        let upper_end = characteristic_flow(&paths, m, 0.0, t, s.spec.psi0.support_bound);
        let n = 200;
        let mut lower = (Curve::default(), 0);
        let mut lo_u = Vec::new();
        let mut lo_v = Vec::new();
        for j in 0..n {
            let u = ustar * (j as f64 + 0.25) / n as f64;
            lo_u.push(u);
            lo_v.push(closed_form_density(&paths, &s.spec, &s.grid, m, u, t));
        }
        lower.0 = Curve::new(lo_u, lo_v);
        let mut up_u = Vec::new();
        let mut up_v = Vec::new();
        for j in 0..=n {
            let u = ustar + (upper_end - ustar) * (j as f64 + 1e-9) / n as f64;
            up_u.push(u);
            up_v.push(closed_form_density(&paths, &s.spec, &s.grid, m, u, t));
        }
        per_r.push(FieldAt {
            lower: lower.0,
            upper: Curve::new(up_u, up_v),
            ustar,
            ubar: 0.0,
            p: 0.0,
            q: 0.0,
        });
    }
    let closed = DensityField { time: t, ell: field.ell, side: field.side, per_r };
    let gap = l1_distance_fields(&closed, field);
    let budget = 2.0 * s.sol.scheme_error();
    report(
        "3 (closed-form cross-check)",
        gap <= budget,
        &format!("L¹(closed form, δ-scheme) = {gap:.3e} vs 2x scheme error {budget:.3e}"),
    );
}

#[test]
fn c04_shock_continuity_detects_compatibility() {
    let compat = solve(&meanfield_toml(r#"{ preset = "compatible-linear", r0 = 1.0 }"#));
    let incompat = meanfield_solved();
    let t = 0.5;
    let jump = |s: &Solved| {
        (0..s.grid.square_count())
            .map(|m| s.sol.shock_jump(m, t).unwrap().abs())
            .fold(0.0f64, f64::max)
    };
    let j_compat = jump(&compat);
    let j_incompat = jump(incompat);
    report(
        "4 (strong-solution continuity)",
        j_compat <= 1e-2 && j_incompat > 0.1,
        &format!("shock jump {j_compat:.3e} with matched boundary data (tol 1e-2), {j_incompat:.3} with mismatched data (must exceed 0.1)"),
    );
}

#[test]
fn c05_one_particle_oracle() {
    let s = spatial_solved();
    let finest = s.sol.finest();
    let paths = CharacteristicPaths::from_trajectory(finest, &s.grid);
    let times = [0.5, 1.0];
    let mut worst: f64 = 0.0;
    for &m in &[0usize, 5, 10] {
        let r = s.grid.centers[m];
        let per_time = one_particle_oracle(&paths, &s.spec, m, r, 100_000, mix(ROOT_SEED, 5), &times);
        for (ti, &t) in times.iter().enumerate() {
            let section = &finest.field_at(t).unwrap().per_r[m];
            let hi = section.support_end() * 1.02;
            let d = l1_histogram_distance(&per_time[ti], section, 28, hi);
            worst = worst.max(d);
        }
    }
    report(
        "5 (one-particle oracle)",
        worst <= 0.02,
        &format!("max L¹(oracle histogram, ρ) = {worst:.4} over 3 positions at t ∈ {{0.5, 1}} (tol 0.02)"),
    );
}

#[test]
fn c06_hydrodynamic_convergence() {
    let solved = solve(&spatial_toml(0.1, 0.2));
    let cfg = ExperimentConfig::from_str(&spatial_toml(0.1, 0.2)).unwrap();
    let specs: Vec<ModelSpec> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&e| cfg.build_model(Some(e)).unwrap())
        .collect();
    let report_data = convergence_study(&specs, solved.sol.finest(), &[1.0], 50, ROOT_SEED);
    let means: Vec<f64> = report_data.cells.iter().map(|c| c.mean[0]).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let halved = means[2] < 0.5 * means[0];
    report(
        "6 (hydrodynamic convergence)",
        decreasing && halved,
        &format!(
            "mean BL distance at t=1: {:.4} (ε=0.2) > {:.4} (ε=0.1) > {:.4} (ε=0.05); final/first = {:.2} (must be < 0.5)",
            means[0], means[1], means[2], means[2] / means[0]
        ),
    );
}

#[test]
fn c07_coupling_bounds() {
    let toml = r#"
        [model]
        epsilon = 0.05
        alpha = 0.1
        synaptic = { preset = "cosine", amplitude = 0.5, contrast = 0.4 }
        gap = { preset = "cosine", amplitude = 1.0, contrast = 0.5 }
        rate = { preset = "linear", clamp = 2.0 }
        psi0 = { preset = "uniform", r0 = 1.0 }

        [run]
        horizon = 1.0
    "#;
    let cfg = ExperimentConfig::from_str(toml).unwrap();
    let spec = cfg.build_model(None).unwrap();
    let substep = spec.default_substep();
    let phi_star = spec.rate.sup_bound;
    let replicas = 20u64;
    use rayon::prelude::*;
    let mut theta_means = Vec::new();
    let mut detail = String::new();
    let mut bad_ok = true;
    for &delta in &[0.2, 0.1, 0.05] {
        // scales shrink with δ so every discretization floor does too
        let part = PartitionSpec::new(delta, delta, delta, delta / 4.0, 1.0).unwrap();
        let sys = AuxSystem::new(&spec, part).unwrap();
        let steps = (1.0 / delta).round() as usize;
        let runs: Vec<CoupleRunSummary> = (0..replicas)
            .into_par_iter()
            .map(|k| {
                let seed = mix(mix(ROOT_SEED, tag_f64(delta)), k);
                let mut u = sample_initial_state(&spec, seed);
                let mut y = bin_initial(&u.potentials, &sys.part).unwrap();
                let mut ledger = CouplingLedger::new(spec.site_count());
                for s in 0..steps {
                    coupled_step(&sys, &mut u, &mut y, &mut ledger, mix(seed, s as u64), substep)
                        .unwrap();
                }
                CoupleRunSummary::from_ledger(&ledger, delta, spec.mesh.epsilon)
            })
            .collect();
        let thetas: Vec<f64> = runs.iter().map(|r| r.theta_max()).collect();
        let bads: Vec<f64> = runs.iter().map(|r| r.bad_mass_max()).collect();
        let (tm, _) = stats::mean_stderr(&thetas);
        let (bm, bs) = stats::mean_stderr(&bads);
        let cap = 4.0 * phi_star * phi_star * delta + 3.0 * bs;
        if bm > cap {
            bad_ok = false;
        }
        detail.push_str(&format!(
            "δ={delta}: θ̄_max={tm:.4}, ε²|B|_max={bm:.4} (cap {cap:.3}); "
        ));
        theta_means.push(tm);
    }
    let theta_monotone = theta_means.windows(2).all(|w| w[1] < w[0]);
    report(
        "7 (coupling bounds)",
        theta_monotone && bad_ok,
        &format!("{detail}θ decreasing: {theta_monotone}"),
    );
}

#[test]
fn c08_level_mass_recursion() {
    let base = r#"
        [model]
        epsilon = 0.2
        alpha = 0.2
        synaptic = { preset = "cosine", amplitude = 0.5, contrast = 0.4 }
        gap = { preset = "cosine", amplitude = 1.0, contrast = 0.5 }
        rate = { preset = "linear", clamp = 2.0 }
        psi0 = { preset = "uniform", r0 = 1.0 }

        [run]
        horizon = 1.0
    "#;
    let cfg = ExperimentConfig::from_str(base).unwrap();
    let cell = (0.25, 0.2, 0.25, 0.0625); // (δ, ℓ, E, τ), nδ = 1 at n = 4
    let steps = 4usize;
    let replicas = 30u64;
    let mut gap_means = Vec::new();
    let mut drift_worst: f64 = 0.0;
    use rayon::prelude::*;
    for &eps in &[0.2, 0.1, 0.05] {
        let spec = cfg.build_model(Some(eps)).unwrap();
        let part = PartitionSpec::new(cell.0, cell.1, cell.2, cell.3, 1.0).unwrap();
        let grid = LimitGrid::new(&spec, cell.1).unwrap();
        let mut ledgers = vec![ledger_init(&spec, &grid, &part)];
        let masses0 = ledgers[0].square_masses();
        for _ in 0..steps {
            ledgers.push(ledger_step(ledgers.last().unwrap(), &grid, &spec.rate));
        }
        for (a, b) in ledgers.last().unwrap().square_masses().iter().zip(&masses0) {
            drift_worst = drift_worst.max((a - b).abs());
        }
        let sys = AuxSystem::new(&spec, part).unwrap();
        let finals: Vec<f64> = (0..replicas)
            .into_par_iter()
            .map(|k| {
                let seed = mix(mix(ROOT_SEED, tag_f64(eps)), 7000 + k);
                let init = sample_initial_state(&spec, seed);
                let mut states = vec![bin_initial(&init.potentials, &sys.part).unwrap()];
                for s in 0..steps {
                    states.push(sys.aux_step(states.last().unwrap(), mix(seed, s as u64)));
                }
                let cmp = ledger_vs_aux(&ledgers, &sys, &states).unwrap();
                cmp.per_step.last().unwrap().1
            })
            .collect();
        let (mean, _) = stats::mean_stderr(&finals);
        gap_means.push(mean);
    }
    let decreasing = gap_means.windows(2).all(|w| w[1] < w[0]);
    report(
        "8 (level/mass recursion)",
        decreasing && drift_worst <= 1e-12,
        &format!(
            "mean max|E−D| at nδ=1: {:.4} (ε=0.2) > {:.4} (ε=0.1) > {:.4} (ε=0.05); ledger mass drift {:.1e} (tol 1e-12)",
            gap_means[0], gap_means[1], gap_means[2], drift_worst
        ),
    );
}

#[test]
fn c09_deterministic_path_bound() {
    let (spec, results) = replica_bank();
    let audit = bound_audit(results, spec, 1.0, 0.25);
    report(
        "9 (deterministic path bound)",
        audit.deterministic_bound_ok,
        &format!(
            "sup‖U‖ ≤ ‖U(0)‖ + a*ε²N(T) in 1000/1000 replicas (min margin {:.3e})",
            audit.deterministic_margin_min
        ),
    );
}

#[test]
fn c10_poisson_domination() {
    let (spec, results) = replica_bank();
    let counts: Vec<f64> = results.iter().map(|(_, r)| r.log.len() as f64).collect();
    let p99 = stats::percentile(&counts, 0.99);
    let lambda = spec.rate.sup_bound / (spec.mesh.epsilon * spec.mesh.epsilon);
    let cap = stats::poisson_quantile(lambda, 0.999) as f64;
    report(
        "10 (Poisson domination)",
        p99 <= cap,
        &format!("empirical 99th pctile of N(1) = {p99} ≤ Poisson({lambda}) 99.9th pctile = {cap}"),
    );
}

#[test]
fn c11_weak_form_residuals() {
    let s = spatial_solved();
    let level6 = &s.sol.levels[1];
    let level7 = &s.sol.levels[2];
    let umax = 1.0 + 1.0 * s.spec.rate.sup_bound * s.spec.syn_sup();
    let mut detail = String::new();
    let mut ok = true;
    for w in WeakTestFn::library(umax) {
        let r6 = weak_residual(level6, &s.grid, &s.spec.rate, &w, 0.5);
        let r7 = weak_residual(level7, &s.grid, &s.spec.rate, &w, 0.5);
        // the residual must sit inside tolerance and shrink with δ, down to
        // the quadrature floor of the stored representation
        let floor = 5e-4;
        let shrinks = r7 <= r6 || (r6 <= floor && r7 <= floor);
        if !(r6 <= 1e-2 && shrinks) {
            ok = false;
        }
        detail.push_str(&format!("{w:?}: {r6:.2e}→{r7:.2e}; "));
    }
    report("11 (weak-form residual)", ok, &detail);
}

#[test]
fn c12_mean_field_symmetry() {
    let s = meanfield_solved();
    // solved field: identical dynamics per square, so sections must agree
    let field = s.sol.finest().field_at(1.0).unwrap();
    let mut worst: f64 = 0.0;
    let probe: Vec<f64> = (0..100).map(|i| i as f64 * 0.02).collect();
    for at in &field.per_r {
        for (&u, base) in probe.iter().zip(probe.iter().map(|&u| field.per_r[0].eval(u))) {
            worst = worst.max((at.eval(u) - base).abs());
        }
    }
    // microscopic side: per-square mean potentials agree across squares
    let spec = &s.spec;
    let part = PartitionSpec::new(0.25, 0.25, 0.25, 0.0625, 1.0).unwrap();
    use rayon::prelude::*;
    let per_square: Vec<Vec<f64>> = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let seed = mix(mix(ROOT_SEED, 0xc12), k);
            let init = sample_initial_state(spec, seed);
            let res = simulate(spec, init, 1.0, seed, spec.default_substep(), &[]).unwrap();
            let mut sums = vec![0.0; part.square_count()];
            let mut counts = vec![0usize; part.square_count()];
            for (i, &u) in res.state.potentials.iter().enumerate() {
                let m = part.square_of(spec.mesh.site(i));
                sums[m] += u;
                counts[m] += 1;
            }
            sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect()
        })
        .collect();
    let mm = part.square_count();
    let mut micro_ok = true;
    let mut micro_detail = (0.0f64, 0.0f64);
    let grand: f64 = per_square.iter().flat_map(|v| v.iter()).sum::<f64>()
        / (per_square.len() * mm) as f64;
    for m in 0..mm {
        let xs: Vec<f64> = per_square.iter().map(|v| v[m]).collect();
        let (mean, se) = stats::mean_stderr(&xs);
        if (mean - grand).abs() > 4.0 * se + 1e-9 {
            micro_ok = false;
        }
        micro_detail.0 = micro_detail.0.max((mean - grand).abs());
        micro_detail.1 = micro_detail.1.max(se);
    }
    report(
        "12 (mean-field symmetry)",
        worst <= 1e-4 && micro_ok,
        &format!(
            "solved field position spread {worst:.2e} (tol 1e-4); micro per-square mean spread {:.4} vs 4·stderr scale {:.4}",
            micro_detail.0, 4.0 * micro_detail.1
        ),
    );
}
