//! The per-square level/mass recursion: the deterministic skeleton the
//! auxiliary process concentrates on, and the piecewise-constant density it
//! induces.
//!
//! Each square carries an ordered list of (level, mass) pairs together with
//! the half-open interval the mass is spread over. One step maps survivors
//! through the affine frozen-average flow plus the step deposit (intervals
//! are affine images of their parents, so widths contract by exactly
//! `e^{-(α+λ_m)δ}` and the family keeps tiling); spikers collapse onto the
//! per-bin reset levels whose intervals tile `[0, shock)`.

use super::field::{DensityField, FieldAt, LimitGrid};
use super::curve::Curve;
use super::LimitError;
use crate::auxcouple::{AuxState, AuxSystem};
use crate::model::{ModelSpec, RateFunction};
use crate::partition::{relax, PartitionSpec};
use serde::Serialize;

/// One potential level: the value, the mass sitting on it and the interval
/// the mass is distributed over when a density is requested.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Level {
    pub value: f64,
    pub mass: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Level lists for every square plus the partition the recursion runs on.
#[derive(Debug, Clone)]
pub struct LevelLedger {
    pub squares: Vec<Vec<Level>>,
    pub step: usize,
    pub delta: f64,
    pub tau: f64,
    pub time_bins: usize,
    pub ebin: f64,
    pub ell: f64,
}

impl LevelLedger {
    /// Total mass per square (per-square constants of the recursion).
    pub fn square_masses(&self) -> Vec<f64> {
        self.squares
            .iter()
            .map(|sq| sq.iter().map(|l| l.mass).sum())
            .collect()
    }

    pub fn levels(&self, m: usize) -> &[Level] {
        &self.squares[m]
    }
}

/// Midpoint-in-position, fine-in-potential masses of the initial law:
/// `ζ_0(m,k) = ℓ² ∫_{I_k} ψ0(u, i_m) du` with composite Simpson per bin.
pub fn ledger_init(spec: &ModelSpec, grid: &LimitGrid, part: &PartitionSpec) -> LevelLedger {
    let ell2 = grid.ell * grid.ell;
    let mut squares = Vec::with_capacity(grid.square_count());
    for m in 0..grid.square_count() {
        let c = grid.centers[m];
        let mut levels = Vec::with_capacity(part.pot_bins);
        for k in 1..=part.pot_bins {
            let lo = (k - 1) as f64 * part.ebin;
            let hi = k as f64 * part.ebin;
            let mass = ell2 * simpson(|u| spec.psi0.evaluate(u, c), lo, hi, 64);
            levels.push(Level { value: part.level_center(k), mass, lo, hi });
        }
        squares.push(levels);
    }
    LevelLedger {
        squares,
        step: 0,
        delta: part.delta,
        tau: part.tau,
        time_bins: part.time_bins,
        ebin: part.ebin,
        ell: grid.ell,
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, panels: usize) -> f64 {
    let n = 2 * panels;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + k as f64 * h);
    }
    s * h / 3.0
}

/// Advance the recursion one macro step.
pub fn ledger_step(ledger: &LevelLedger, grid: &LimitGrid, rate: &RateFunction) -> LevelLedger {
    let mm = grid.square_count();
    let delta = ledger.delta;
    let hh = ledger.time_bins;

    // expected averages and deposits from the current levels
    let weighted_sum: Vec<f64> = (0..mm)
        .map(|m| ledger.squares[m].iter().map(|l| l.value * l.mass).sum())
        .collect();
    let e_bar: Vec<f64> = (0..mm)
        .map(|m| {
            let row = &grid.gap_norm[m * mm..(m + 1) * mm];
            row.iter().zip(&weighted_sum).map(|(b, s)| b * s).sum()
        })
        .collect();
    // per source square: total spike mass and per-bin prefix masses
    let spike_total: Vec<f64> = (0..mm)
        .map(|mp| {
            let c = grid.centers[mp];
            ledger.squares[mp]
                .iter()
                .map(|l| l.mass * (1.0 - (-delta * rate.evaluate(l.value, c)).exp()))
                .sum()
        })
        .collect();
    // mass of source square mp spiking strictly before bin h's remaining time
    let spike_prefix: Vec<Vec<f64>> = (0..mm)
        .map(|mp| {
            let c = grid.centers[mp];
            (0..=hh)
                .map(|h| {
                    if h <= 1 {
                        return 0.0;
                    }
                    let t_remaining = (h as f64 - 1.0) * ledger.tau;
                    ledger.squares[mp]
                        .iter()
                        .map(|l| {
                            let phi = rate.evaluate(l.value, c);
                            l.mass * ((-(delta - t_remaining) * phi).exp() - (-delta * phi).exp())
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    let deposit_full: Vec<f64> = (0..mm)
        .map(|m| (0..mm).map(|mp| grid.syn[mp * mm + m] * spike_total[mp]).sum())
        .collect();
    let deposit_bin: Vec<Vec<f64>> = (0..mm)
        .map(|m| {
            (0..=hh)
                .map(|h| (0..mm).map(|mp| grid.syn[mp * mm + m] * spike_prefix[mp][h]).sum())
                .collect()
        })
        .collect();

    let mut squares = Vec::with_capacity(mm);
    for m in 0..mm {
        let c = grid.centers[m];
        let lam = grid.lambda[m];
        let affine = |x: f64| relax(delta, grid.alpha, lam, e_bar[m], x) + deposit_full[m];
        // survivors: affine images of levels and their intervals
        let survivors: Vec<Level> = ledger.squares[m]
            .iter()
            .map(|l| {
                let keep = (-delta * rate.evaluate(l.value, c)).exp();
                Level {
                    value: affine(l.value),
                    mass: l.mass * keep,
                    lo: affine(l.lo),
                    hi: affine(l.hi),
                }
            })
            .collect();
        // reset-born levels, one per time bin, tiling [0, junction)
        let junction = affine(ledger.squares[m].first().map(|l| l.lo).unwrap_or(0.0));
        let mut fresh: Vec<Level> = Vec::with_capacity(hh);
        for h in 1..=hh {
            let t_remaining = (h as f64 - 1.0) * ledger.tau;
            let value = relax(t_remaining, grid.alpha, lam, e_bar[m], 0.0) + deposit_bin[m][h];
            let mass: f64 = ledger.squares[m]
                .iter()
                .map(|l| {
                    let phi = rate.evaluate(l.value, c);
                    l.mass
                        * ((-(delta - h as f64 * ledger.tau) * phi).exp()
                            - (-(delta - (h as f64 - 1.0) * ledger.tau) * phi).exp())
                })
                .sum();
            fresh.push(Level { value, mass, lo: value, hi: f64::NAN });
        }
        for h in 0..hh {
            fresh[h].hi = if h + 1 < hh { fresh[h + 1].value } else { junction };
        }
        let mut levels = fresh;
        levels.extend(survivors);
        merge_degenerate(&mut levels);
        squares.push(levels);
    }
    LevelLedger {
        squares,
        step: ledger.step + 1,
        delta,
        tau: ledger.tau,
        time_bins: hh,
        ebin: ledger.ebin,
        ell: ledger.ell,
    }
}

/// Coalesce levels whose values coincide to rounding (degenerate parameter
/// corners only: no flow and no deposits collapse all reset levels onto 0).
fn merge_degenerate(levels: &mut Vec<Level>) {
    let mut out: Vec<Level> = Vec::with_capacity(levels.len());
    for l in levels.drain(..) {
        if let Some(last) = out.last_mut() {
            if (l.value - last.value).abs() <= 1e-12 * (1.0 + l.value.abs()) {
                last.mass += l.mass;
                last.hi = last.hi.max(l.hi);
                continue;
            }
        }
        out.push(l);
    }
    *levels = out;
}

/// Spread each level's mass uniformly over its interval.
pub fn density_from_ledger(ledger: &LevelLedger, grid: &LimitGrid) -> Result<DensityField, LimitError> {
    let ell2 = ledger.ell * ledger.ell;
    let mut per_r = Vec::with_capacity(ledger.squares.len());
    for (m, levels) in ledger.squares.iter().enumerate() {
        let mut u = Vec::with_capacity(2 * levels.len());
        let mut v = Vec::with_capacity(2 * levels.len());
        let mut prev_hi = f64::NEG_INFINITY;
        for l in levels {
            let width = l.hi - l.lo;
            if l.lo < prev_hi - 1e-12 * (1.0 + prev_hi.abs()) {
                return Err(LimitError::OverlappingIntervals { square: m, at: l.lo });
            }
            if width <= 0.0 {
                if l.mass > 1e-12 {
                    return Err(LimitError::OverlappingIntervals { square: m, at: l.lo });
                }
                continue;
            }
            let density = l.mass / (width * ell2);
            u.push(l.lo);
            v.push(density);
            u.push(l.hi);
            v.push(density);
            prev_hi = l.hi;
        }
        per_r.push(FieldAt {
            lower: Curve::default(),
            upper: Curve::new(u, v),
            ustar: 0.0,
            ubar: 0.0,
            p: 0.0,
            q: 0.0,
        });
    }
    Ok(DensityField {
        time: ledger.step as f64 * ledger.delta,
        ell: ledger.ell,
        side: grid.side,
        per_r,
    })
}

/// Per-step gaps between one realized auxiliary trajectory and the
/// deterministic recursion, on matching level indices.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerComparison {
    pub epsilon: f64,
    /// `(step, max_k |E_k - D_k|, max_k ε²|η_k - ε⁻²ζ_k|)` — level gaps over
    /// occupied classes, mass gaps over all ledger classes.
    pub per_step: Vec<(usize, f64, f64)>,
}

/// Compare an auxiliary trajectory (states at steps `0..=N`) against the
/// matching ledger trajectory. The two must share the partition scales.
pub fn ledger_vs_aux(
    ledgers: &[LevelLedger],
    sys: &AuxSystem,
    states: &[AuxState],
) -> Result<LedgerComparison, LimitError> {
    let l0 = ledgers.first().ok_or(LimitError::MismatchedPartitions)?;
    let p = &sys.part;
    if (l0.delta - p.delta).abs() > 1e-12
        || (l0.tau - p.tau).abs() > 1e-12
        || (l0.ebin - p.ebin).abs() > 1e-12
        || (l0.ell - p.ell).abs() > 1e-12
    {
        return Err(LimitError::MismatchedPartitions);
    }
    let eps = sys.spec.mesh.epsilon;
    let eps2 = eps * eps;
    let mm = p.square_count();
    let mut per_step = Vec::new();
    for (ledger, state) in ledgers.iter().zip(states) {
        // realized level values and occupancies per (square, class)
        let mut level_gap: f64 = 0.0;
        let mut mass_gap: f64 = 0.0;
        for m in 0..mm {
            let classes = ledger.squares[m].len();
            let mut counts = vec![0u64; classes];
            let mut values = vec![f64::NAN; classes];
            for (i, (&y, &li)) in state.potentials.iter().zip(&state.level_index).enumerate() {
                if sys.site_square[i] == m {
                    // degenerate-merge can shrink the ledger's class list;
                    // clamp like the merge does
                    let li = li.min(classes - 1);
                    counts[li] += 1;
                    values[li] = y;
                }
            }
            for (k, l) in ledger.squares[m].iter().enumerate() {
                if counts[k] > 0 {
                    level_gap = level_gap.max((values[k] - l.value).abs());
                }
                mass_gap = mass_gap.max((eps2 * counts[k] as f64 - l.mass).abs());
            }
        }
        per_step.push((state.step, level_gap, mass_gap));
    }
    Ok(LedgerComparison { epsilon: eps, per_step })
}
