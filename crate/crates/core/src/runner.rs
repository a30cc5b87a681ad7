//! Orchestration: dispatching subcommands, reproducible artifact
//! directories, and the CSV/JSON writers.
//!
//! Every artifact directory gets a `run_manifest.json` echoing the resolved
//! configuration, the seed and the version, so any output can be reproduced
//! exactly. Writers are single-threaded; parallelism stays inside the
//! replica loops. On failure, files already written are renamed with a
//! `.partial` suffix.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::auxcouple::{
    bin_initial, coupled_step, coupling_report, AuxError, AuxSystem, CoupleRunSummary,
    CouplingLedger,
};
use crate::config::{ConfigError, ExperimentConfig, PartitionCell};
use crate::limit::{
    density_from_ledger, ledger_init, ledger_step, ledger_vs_aux, solve_pde, weak_residual,
    DensityField, LimitError, LimitGrid, WeakTestFn,
};
use crate::metrics::{bound_audit, convergence_study};
use crate::microsim::{sample_summary, simulate, SimError};
use crate::model::{sample_initial_state, ModelError, ModelSpec};
use crate::partition::{PartitionError, PartitionSpec};
use crate::rng::{mix, tag_f64};
use crate::stats;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("subcommand needs a [partition] section or explicit scale flags")]
    MissingPartition,
    #[error("subcommand needs a [convergence] section or an --epsilons flag")]
    MissingConvergence,
}

/// Artifact directory with partial-output bookkeeping.
pub struct ArtifactDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactDir {
    pub fn create(dir: &Path) -> Result<Self, RunnerError> {
        fs::create_dir_all(dir).map_err(|e| RunnerError::Io(dir.to_path_buf(), e))?;
        Ok(ArtifactDir { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), RunnerError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| RunnerError::Io(path.clone(), e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), RunnerError> {
        self.write(name, &serde_json::to_string_pretty(value).unwrap_or_default())
    }

    /// Rename everything written so far with a `.partial` suffix.
    pub fn mark_partial(&self) {
        for p in &self.written {
            let mut partial = p.clone().into_os_string();
            partial.push(".partial");
            let _ = fs::rename(p, partial);
        }
    }
}

fn csv_row(fields: &[&dyn Display]) -> String {
    fields.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
}

fn csv(header: &str, rows: Vec<String>) -> String {
    let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn manifest(
    cfg: &ExperimentConfig,
    subcommand: &str,
    seed: u64,
    threads: usize,
    wall: f64,
) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "tool": format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        "subcommand": subcommand,
        "seed": seed,
        "threads": threads,
        "wall_seconds": wall,
        "config": cfg.echo,
    })
}

/// Resolved invocation shared by all subcommands.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

impl RunContext {
    pub fn new(
        config: ExperimentConfig,
        out: Option<PathBuf>,
        seed: Option<u64>,
        threads: usize,
    ) -> Self {
        let out_dir = out.unwrap_or_else(|| config.output_dir.clone());
        let seed = seed.unwrap_or(config.run.seed);
        RunContext { config, out_dir, seed, threads }
    }

    fn cells_or(&self, flags: Option<PartitionCell>) -> Result<Vec<PartitionCell>, RunnerError> {
        if let Some(c) = flags {
            return Ok(vec![c]);
        }
        if self.config.partition_cells.is_empty() {
            return Err(RunnerError::MissingPartition);
        }
        Ok(self.config.partition_cells.clone())
    }
}

fn with_partial_guard<F>(dir: &Path, f: F) -> Result<(), RunnerError>
where
    F: FnOnce(&mut ArtifactDir) -> Result<(), RunnerError>,
{
    let mut art = ArtifactDir::create(dir)?;
    match f(&mut art) {
        Ok(()) => Ok(()),
        Err(e) => {
            art.mark_partial();
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn run_simulate(ctx: &RunContext) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.build_model(None)?;
    let substep = cfg.substep(&spec);
    let horizon = cfg.run.horizon;
    let snaps = cfg.run.snapshot_times.clone();
    with_partial_guard(&ctx.out_dir, |art| {
        let init = sample_initial_state(&spec, ctx.seed);
        let res = simulate(&spec, init, horizon, ctx.seed, substep, &snaps)?;
        let rows = res
            .log
            .iter()
            .map(|e| csv_row(&[&e.time, &e.site, &e.pre_potential]))
            .collect();
        art.write("events.csv", &csv("time,site,pre_potential", rows))?;
        for (t, pots) in &res.snapshots {
            let rows = pots
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let (x, y) = spec.mesh.site(i);
                    csv_row(&[&x, &y, u])
                })
                .collect();
            art.write(&format!("snapshot_{t}.csv"), &csv("site_x,site_y,potential", rows))?;
        }
        art.write_json("summary.json", &sample_summary(&res, t0.elapsed().as_secs_f64()))?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "simulate", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// aux
// ---------------------------------------------------------------------------

pub fn run_aux(ctx: &RunContext, flags: Option<PartitionCell>) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.build_model(None)?;
    let cells = ctx.cells_or(flags)?;
    let horizon = cfg.run.horizon;
    with_partial_guard(&ctx.out_dir, |art| {
        let mut level_rows = Vec::new();
        let mut summaries = Vec::new();
        for cell in &cells {
            let part = PartitionSpec::new(
                cell.delta,
                cell.ell,
                cell.ebin,
                cell.tau,
                spec.psi0.support_bound,
            )?;
            let sys = AuxSystem::new(&spec, part)?;
            let grid = LimitGrid::new(&spec, cell.ell)?;
            let steps = (horizon / cell.delta).round() as usize;
            let mut ledgers = vec![ledger_init(&spec, &grid, &sys.part)];
            for _ in 0..steps {
                ledgers.push(ledger_step(ledgers.last().unwrap(), &grid, &spec.rate));
            }
            let init = sample_initial_state(&spec, ctx.seed);
            let mut states = vec![bin_initial(&init.potentials, &sys.part)?];
            for s in 0..steps {
                let seed = mix(mix(ctx.seed, tag_f64(cell.delta)), s as u64);
                states.push(sys.aux_step(states.last().unwrap(), seed));
            }
            // occupancy per (step, square, class)
            for (n, state) in states.iter().enumerate() {
                let mm = sys.part.square_count();
                let classes = ledgers[n].squares.iter().map(|s| s.len()).max().unwrap_or(0);
                let mut counts = vec![vec![0u64; classes]; mm];
                let mut values = vec![vec![f64::NAN; classes]; mm];
                for (i, (&y, &li)) in
                    state.potentials.iter().zip(&state.level_index).enumerate()
                {
                    let m = sys.site_square[i];
                    let li = li.min(classes.saturating_sub(1));
                    counts[m][li] += 1;
                    values[m][li] = y;
                }
                for m in 0..mm {
                    for k in 0..ledgers[n].squares[m].len() {
                        if counts[m][k] > 0 {
                            level_rows.push(csv_row(&[
                                &cell.delta,
                                &n,
                                &m,
                                &k,
                                &values[m][k],
                                &counts[m][k],
                            ]));
                        }
                    }
                }
            }
            let cmp = ledger_vs_aux(&ledgers, &sys, &states)?;
            summaries.push(json!({
                "delta": cell.delta, "ell": cell.ell, "ebin": cell.ebin, "tau": cell.tau,
                "steps": steps,
                "per_step_gaps": cmp.per_step.iter().map(|(n, lg, mg)| json!({
                    "step": n, "max_level_gap": lg, "max_mass_gap": mg
                })).collect::<Vec<_>>(),
            }));
        }
        art.write("aux_levels.csv", &csv("delta,step,square,class,level,count", level_rows))?;
        art.write_json(
            "aux_summary.json",
            &json!({ "schema_version": SCHEMA_VERSION, "cells": summaries }),
        )?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "aux", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// couple
// ---------------------------------------------------------------------------

pub fn run_couple(ctx: &RunContext, flags: Option<PartitionCell>) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.build_model(None)?;
    let substep = cfg.substep(&spec);
    let cells = ctx.cells_or(flags)?;
    let horizon = cfg.run.horizon;
    let replicas = cfg.run.replicas;
    with_partial_guard(&ctx.out_dir, |art| {
        let mut rows = Vec::new();
        let mut runs: Vec<CoupleRunSummary> = Vec::new();
        for cell in &cells {
            let part = PartitionSpec::new(
                cell.delta,
                cell.ell,
                cell.ebin,
                cell.tau,
                spec.psi0.support_bound,
            )?;
            let sys = AuxSystem::new(&spec, part)?;
            let steps = (horizon / cell.delta).round() as usize;
            let cell_runs: Vec<CoupleRunSummary> = (0..replicas as u64)
                .into_par_iter()
                .map(|k| {
                    let seed = mix(mix(ctx.seed, tag_f64(cell.delta)), k);
                    let mut u = sample_initial_state(&spec, seed);
                    let mut y = bin_initial(&u.potentials, &sys.part).expect("support bound");
                    let mut ledger = CouplingLedger::new(spec.site_count());
                    for s in 0..steps {
                        coupled_step(&sys, &mut u, &mut y, &mut ledger, mix(seed, s as u64), substep)
                            .expect("clocks advance by delta");
                    }
                    CoupleRunSummary::from_ledger(&ledger, cell.delta, spec.mesh.epsilon)
                })
                .collect();
            for (k, run) in cell_runs.iter().enumerate() {
                for (i, (theta, bad)) in
                    run.theta_by_step.iter().zip(&run.bad_mass_by_step).enumerate()
                {
                    rows.push(csv_row(&[&cell.delta, &k, &(i + 1), theta, bad]));
                }
            }
            runs.extend(cell_runs);
        }
        let report = coupling_report(&runs);
        art.write("coupling.csv", &csv("delta,replica,n,theta_n,bad_fraction", rows))?;
        art.write_json(
            "coupling_summary.json",
            &json!({
                "schema_version": SCHEMA_VERSION,
                "replicas": replicas,
                "report": report,
            }),
        )?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "couple", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// pde
// ---------------------------------------------------------------------------

pub fn run_pde(ctx: &RunContext) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.build_model(None)?;
    let horizon = cfg.run.horizon;
    with_partial_guard(&ctx.out_dir, |art| {
        let grid = LimitGrid::new(&spec, cfg.pde.ell)?;
        let f0 = DensityField::from_initial(&spec, &grid, cfg.pde.ugrid);
        let sol = solve_pde(
            &f0,
            &grid,
            &spec.rate,
            horizon,
            cfg.pde.delta_finest,
            cfg.pde.delta_levels,
            cfg.pde.spike_nodes,
        )?;
        let finest = sol.finest();
        // densities at the requested times (default: quarter points)
        let times = if cfg.run.snapshot_times.is_empty() {
            vec![horizon / 4.0, horizon / 2.0, horizon]
        } else {
            cfg.run.snapshot_times.clone()
        };
        for &t in &times {
            if let Some(f) = finest.field_at(t) {
                let mut rows = Vec::new();
                for (m, at) in f.per_r.iter().enumerate() {
                    let (cx, cy) = grid.centers[m];
                    for (u, v) in at.lower.u.iter().zip(&at.lower.v) {
                        rows.push(csv_row(&[u, &cx, &cy, v]));
                    }
                    for (u, v) in at.upper.u.iter().zip(&at.upper.v) {
                        rows.push(csv_row(&[u, &cx, &cy, v]));
                    }
                }
                art.write(&format!("rho_{t}.csv"), &csv("u,r_x,r_y,rho", rows))?;
            }
        }
        let mut scalar_rows = Vec::new();
        for f in &finest.fields {
            for (m, at) in f.per_r.iter().enumerate() {
                let (cx, cy) = grid.centers[m];
                scalar_rows.push(csv_row(&[
                    &f.time, &cx, &cy, &at.ubar, &at.p, &at.q, &at.ustar,
                ]));
            }
        }
        art.write("scalars.csv", &csv("t,r_x,r_y,ubar,p,q,ustar", scalar_rows))?;

        // summary: mass defects, boundary-law defects, weak residuals
        let mass_defect = finest
            .fields
            .iter()
            .flat_map(|f| f.mass_defects())
            .fold(0.0f64, f64::max);
        let boundary_defects: Vec<f64> = times
            .iter()
            .filter_map(|&t| {
                let worst = (0..grid.square_count())
                    .filter_map(|m| {
                        let v = sol.boundary_value(m, t)?;
                        let ubar = sol.extrapolate(t, |f| f.per_r[m].ubar)?;
                        let p = sol.extrapolate(t, |f| f.per_r[m].p)?;
                        let q = sol.extrapolate(t, |f| f.per_r[m].q)?;
                        Some((v - q / (grid.lambda[m] * ubar + p)).abs())
                    })
                    .fold(0.0f64, f64::max);
                Some(worst)
            })
            .collect();
        let umax = spec.psi0.support_bound + horizon * spec.rate.sup_bound * spec.syn_sup();
        let mid = horizon / 2.0;
        let residuals: Vec<f64> = WeakTestFn::library(umax)
            .iter()
            .map(|w| weak_residual(finest, &grid, &spec.rate, w, mid))
            .collect();
        art.write_json(
            "pde_summary.json",
            &json!({
                "schema_version": SCHEMA_VERSION,
                "delta_levels": sol.levels.iter().map(|l| l.delta).collect::<Vec<_>>(),
                "level_l1_gaps": sol.level_gaps,
                "converged": sol.converged,
                "max_mass_defect": mass_defect,
                "boundary_defects": boundary_defects,
                "weak_residuals_at_mid_horizon": residuals,
            }),
        )?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "pde", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// converge
// ---------------------------------------------------------------------------

pub fn run_converge(ctx: &RunContext, epsilons: Option<Vec<f64>>) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let eps_list = epsilons
        .or_else(|| cfg.convergence.as_ref().map(|c| c.epsilons.clone()))
        .ok_or(RunnerError::MissingConvergence)?;
    let horizon = cfg.run.horizon;
    let times = cfg
        .convergence
        .as_ref()
        .map(|c| c.times.clone())
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| vec![horizon / 2.0, horizon]);
    with_partial_guard(&ctx.out_dir, |art| {
        let spec0 = cfg.build_model(None)?;
        let grid = LimitGrid::new(&spec0, cfg.pde.ell)?;
        let f0 = DensityField::from_initial(&spec0, &grid, cfg.pde.ugrid);
        let sol = solve_pde(
            &f0,
            &grid,
            &spec0.rate,
            horizon,
            cfg.pde.delta_finest,
            cfg.pde.delta_levels,
            cfg.pde.spike_nodes,
        )?;
        let mut specs = Vec::new();
        let mut skipped = Vec::new();
        for &eps in &eps_list {
            match cfg.build_model(Some(eps)) {
                Ok(s) => specs.push(s),
                Err(e) => skipped.push(json!({ "epsilon": eps, "reason": e.to_string() })),
            }
        }
        let report =
            convergence_study(&specs, sol.finest(), &times, cfg.run.replicas, ctx.seed);
        let mut rows = Vec::new();
        for cell in &report.cells {
            for (ti, t) in report.times.iter().enumerate() {
                rows.push(csv_row(&[
                    &cell.epsilon,
                    t,
                    &cell.mean[ti],
                    &cell.stderr[ti],
                    &cell.replicas,
                ]));
            }
        }
        art.write("convergence.csv", &csv("epsilon,time,mean_bl,stderr,replicas", rows))?;
        art.write_json(
            "report.json",
            &json!({
                "schema_version": SCHEMA_VERSION,
                "report": report,
                "skipped_cells": skipped,
                "pde_level_gaps": sol.level_gaps,
            }),
        )?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "converge", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

pub fn run_audit(ctx: &RunContext) -> Result<(), RunnerError> {
    let t0 = Instant::now();
    let cfg = &ctx.config;
    let spec = cfg.build_model(None)?;
    let substep = cfg.substep(&spec);
    let horizon = cfg.run.horizon;
    let window = cfg
        .partition_cells
        .first()
        .map(|c| c.delta)
        .unwrap_or(horizon / 4.0);
    with_partial_guard(&ctx.out_dir, |art| {
        let results: Vec<(f64, crate::microsim::SimResult)> = (0..cfg.run.replicas as u64)
            .into_par_iter()
            .map(|k| {
                let seed = mix(ctx.seed, k);
                let init = sample_initial_state(&spec, seed);
                let u0 = init.max_potential();
                let res = simulate(&spec, init, horizon, seed, substep, &[])
                    .expect("positive horizon");
                (u0, res)
            })
            .collect();
        let report = bound_audit(&results, &spec, horizon, window);
        assert!(
            report.deterministic_bound_ok,
            "path-wise bound violated: this is an implementation bug"
        );
        let counts: Vec<f64> = results.iter().map(|(_, r)| r.log.len() as f64).collect();
        let (mean_spikes, se_spikes) = stats::mean_stderr(&counts);
        art.write_json(
            "audit.json",
            &json!({
                "schema_version": SCHEMA_VERSION,
                "report": report,
                "mean_spikes": mean_spikes,
                "stderr_spikes": se_spikes,
            }),
        )?;
        art.write_json(
            "run_manifest.json",
            &manifest(cfg, "audit", ctx.seed, ctx.threads, t0.elapsed().as_secs_f64()),
        )
    })
}

// ---------------------------------------------------------------------------
// ledger density export (used by the pde subcommand tests and the C ABI)
// ---------------------------------------------------------------------------

/// Density field the level/mass recursion induces after `steps` macro steps.
pub fn ledger_density(
    spec: &ModelSpec,
    cell: &PartitionCell,
    steps: usize,
) -> Result<DensityField, RunnerError> {
    let part = PartitionSpec::new(cell.delta, cell.ell, cell.ebin, cell.tau, spec.psi0.support_bound)?;
    let grid = LimitGrid::new(spec, cell.ell)?;
    let mut ledger = ledger_init(spec, &grid, &part);
    for _ in 0..steps {
        ledger = ledger_step(&ledger, &grid, &spec.rate);
    }
    Ok(density_from_ledger(&ledger, &grid)?)
}
