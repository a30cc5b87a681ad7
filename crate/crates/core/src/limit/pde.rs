//! The δ-stepped transport scheme.
//!
//! One step maps the whole field through the affine survivor flow (nodes are
//! transported, values are damped by the survival weight and the volume
//! factor) and lays fresh reset-born mass on `[0, x_n(r))`, parametrized by
//! the flow time left after the spike. The shock is the transported image of
//! the origin and always sits exactly between the two stored sections.

use super::curve::Curve;
use super::field::{l1_distance_fields, DensityField, FieldAt, LimitGrid};
use super::LimitError;
use crate::model::RateFunction;
use crate::partition::relax;

struct StepTables {
    /// `∫ ρ(v, c_m') (e^{-θ_j φ} - e^{-δ φ}) dv` per source square and node.
    dep: Vec<Vec<f64>>,
    /// `∫ ρ(v, c_m') φ e^{-θ_j φ} dv` per source square and node.
    pw: Vec<Vec<f64>>,
    /// `∫ u ρ du` per source square.
    m1: Vec<f64>,
}

fn step_tables(
    field: &DensityField,
    grid: &LimitGrid,
    rate: &RateFunction,
    delta: f64,
    nodes: usize,
) -> StepTables {
    let mm = grid.square_count();
    let mut dep = vec![vec![0.0; nodes + 1]; mm];
    let mut pw = vec![vec![0.0; nodes + 1]; mm];
    let mut m1 = vec![0.0; mm];
    for mp in 0..mm {
        let c = grid.centers[mp];
        let at = &field.per_r[mp];
        m1[mp] = at.moment(|u| u);
        for j in 0..=nodes {
            let t_flow = delta * (j as f64 / nodes as f64);
            let theta = delta - t_flow;
            dep[mp][j] = at.moment(|u| {
                let phi = rate.evaluate(u, c);
                (-theta * phi).exp() - (-delta * phi).exp()
            });
            pw[mp][j] = at.moment(|u| {
                let phi = rate.evaluate(u, c);
                phi * (-theta * phi).exp()
            });
        }
    }
    StepTables { dep, pw, m1 }
}

/// Advance the field one macro step of length `delta`.
pub fn rho_delta_step(
    field: &DensityField,
    grid: &LimitGrid,
    rate: &RateFunction,
    delta: f64,
    spike_nodes: usize,
) -> DensityField {
    let mm = grid.square_count();
    let ell2 = grid.ell * grid.ell;
    let nodes = spike_nodes.max(2);
    let tables = step_tables(field, grid, rate, delta, nodes);
    let ubar: Vec<f64> = (0..mm)
        .map(|m| {
            let row = &grid.gap_norm[m * mm..(m + 1) * mm];
            ell2 * row.iter().zip(&tables.m1).map(|(b, x)| b * x).sum::<f64>()
        })
        .collect();
    let syn_sum = |m: usize, per_source: &dyn Fn(usize) -> f64| -> f64 {
        ell2 * (0..mm).map(|mp| grid.syn[mp * mm + m] * per_source(mp)).sum::<f64>()
    };

    let mut per_r = Vec::with_capacity(mm);
    for m in 0..mm {
        let c = grid.centers[m];
        let lam = grid.lambda[m];
        let rate_sum = grid.alpha + lam;
        let deposit_full = syn_sum(m, &|mp| tables.dep[mp][nodes]);
        let affine =
            |x: f64| relax(delta, grid.alpha, lam, ubar[m], x) + deposit_full;
        let damp = |u_old: f64| {
            (-delta * (rate.evaluate(u_old, c) - rate_sum)).exp()
        };

        // transported sections
        let transport = |curve: &Curve| -> Curve {
            let u: Vec<f64> = curve.u.iter().map(|&x| affine(x)).collect();
            let v: Vec<f64> =
                curve.u.iter().zip(&curve.v).map(|(&x, &w)| w * damp(x)).collect();
            Curve::new(u, v)
        };
        let moved_lower = transport(&field.per_r[m].lower);
        let upper = transport(&field.per_r[m].upper);
        let ustar = affine(field.per_r[m].ustar);

        // fresh reset-born nodes, parametrized by the remaining flow time
        let mut fresh_u = Vec::with_capacity(nodes + 1);
        let mut fresh_v = Vec::with_capacity(nodes + 1);
        for j in 0..=nodes {
            let t_flow = delta * (j as f64 / nodes as f64);
            let u = relax(t_flow, grid.alpha, lam, ubar[m], 0.0)
                + syn_sum(m, &|mp| tables.dep[mp][j]);
            let q_tilde = tables.pw[m][j];
            let p_tilde = syn_sum(m, &|mp| tables.pw[mp][j]);
            let denom = lam * ubar[m] * (-t_flow * rate_sum).exp() + p_tilde;
            let value = if denom > 0.0 { q_tilde / denom } else { 0.0 };
            let u = fresh_u.last().map_or(u, |&prev: &f64| u.max(prev));
            fresh_u.push(u);
            fresh_v.push(value);
        }
        let mut lower_u = fresh_u;
        let mut lower_v = fresh_v;
        if !moved_lower.is_empty() {
            lower_u.extend_from_slice(&moved_lower.u);
            lower_v.extend_from_slice(&moved_lower.v);
        }
        per_r.push(FieldAt {
            lower: Curve::new(lower_u, lower_v),
            upper,
            ustar,
            ubar: 0.0,
            p: 0.0,
            q: 0.0,
        });
    }
    let mut next = DensityField {
        time: field.time + delta,
        ell: field.ell,
        side: field.side,
        per_r,
    };
    next.refresh_scalars(rate, grid);
    next
}

/// Flow time after the spike that deposits a neuron at potential `u < x_n`:
/// bisection of the strictly increasing map
/// `t ↦ Φ_{t,ū}(0) + Σ deposits received after the spike` on `[0, δ]`.
pub fn spike_time_of_potential(
    field: &DensityField,
    grid: &LimitGrid,
    rate: &RateFunction,
    m: usize,
    u: f64,
    delta: f64,
) -> Result<f64, LimitError> {
    let mm = grid.square_count();
    let ell2 = grid.ell * grid.ell;
    let lam = grid.lambda[m];
    let ubar_m = {
        let row = &grid.gap_norm[m * mm..(m + 1) * mm];
        ell2 * row
            .iter()
            .enumerate()
            .map(|(mp, b)| b * field.per_r[mp].moment(|u| u))
            .sum::<f64>()
    };
    let value_at = |t_flow: f64| -> f64 {
        let flow = relax(t_flow, grid.alpha, lam, ubar_m, 0.0);
        let theta = delta - t_flow;
        let dep: f64 = (0..mm)
            .map(|mp| {
                let c = grid.centers[mp];
                grid.syn[mp * mm + m]
                    * field.per_r[mp].moment(|v| {
                        let phi = rate.evaluate(v, c);
                        (-theta * phi).exp() - (-delta * phi).exp()
                    })
            })
            .sum::<f64>();
        flow + ell2 * dep
    };
    let hi_val = value_at(delta);
    if u < 0.0 || u > hi_val {
        return Err(LimitError::NoBracket { u, delta });
    }
    let (mut lo, mut hi) = (0.0f64, delta);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if value_at(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One δ level of the scheme: the field at every macro step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub delta: f64,
    pub fields: Vec<DensityField>,
}

impl Trajectory {
    /// Field at time `t` if it sits on this level's step grid.
    pub fn field_at(&self, t: f64) -> Option<&DensityField> {
        let idx = t / self.delta;
        let i = idx.round() as usize;
        if (idx - i as f64).abs() < 1e-9 && i < self.fields.len() {
            Some(&self.fields[i])
        } else {
            None
        }
    }
}

/// The scheme run over a dyadic δ-sequence, coarsest first.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub levels: Vec<Trajectory>,
    pub horizon: f64,
    /// L¹ distance between consecutive levels at the horizon.
    pub level_gaps: Vec<f64>,
    /// Gaps decreasing down the sequence (the first-order scheme converges).
    pub converged: bool,
}

impl PdeSolution {
    pub fn finest(&self) -> &Trajectory {
        self.levels.last().unwrap()
    }

    fn second_finest(&self) -> &Trajectory {
        &self.levels[self.levels.len() - 2]
    }

    /// Richardson error estimate for the finest level.
    pub fn scheme_error(&self) -> f64 {
        *self.level_gaps.last().unwrap()
    }

    /// First-order Richardson extrapolation of a per-field scalar at a time
    /// on the coarser grid.
    pub fn extrapolate<F: Fn(&DensityField) -> f64>(&self, t: f64, f: F) -> Option<f64> {
        let fine = self.finest().field_at(t)?;
        let coarse = self.second_finest().field_at(t)?;
        Some(2.0 * f(fine) - f(coarse))
    }

    /// Extrapolated density value at `0⁺` for square `m`.
    pub fn boundary_value(&self, m: usize, t: f64) -> Option<f64> {
        self.extrapolate(t, |f| f.per_r[m].boundary_value())
    }

    /// Extrapolated jump across the shock for square `m`.
    pub fn shock_jump(&self, m: usize, t: f64) -> Option<f64> {
        self.extrapolate(t, |f| f.per_r[m].shock_jump())
    }
}

/// Run the scheme at `level_count` dyadic δ levels ending at `delta_finest`,
/// each to the given horizon.
pub fn solve_pde(
    initial: &DensityField,
    grid: &LimitGrid,
    rate: &RateFunction,
    horizon: f64,
    delta_finest: f64,
    level_count: usize,
    spike_nodes: usize,
) -> Result<PdeSolution, LimitError> {
    if level_count < 2 {
        return Err(LimitError::BadDeltaSequence);
    }
    let mut levels = Vec::with_capacity(level_count);
    for lvl in (0..level_count).rev() {
        let delta = delta_finest * (1u64 << lvl) as f64;
        let steps = horizon / delta;
        let n = steps.round();
        if !(n >= 1.0) || (steps - n).abs() > 1e-9 {
            return Err(LimitError::BadDeltaSequence);
        }
        let mut fields = vec![initial.clone()];
        for _ in 0..n as usize {
            let next = rho_delta_step(fields.last().unwrap(), grid, rate, delta, spike_nodes);
            fields.push(next);
        }
        levels.push(Trajectory { delta, fields });
    }
    let mut level_gaps = Vec::new();
    for w in levels.windows(2) {
        let a = w[0].fields.last().unwrap();
        let b = w[1].fields.last().unwrap();
        level_gaps.push(l1_distance_fields(a, b));
    }
    let converged = level_gaps.windows(2).all(|g| g[1] <= g[0] * 1.05);
    Ok(PdeSolution { levels, horizon, level_gaps, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::field::DensityField;
    use crate::model::testutil::small_spec;
    use crate::model::{
        build_mesh, clamp_rate, InitialDensity, Kernel, KernelPreset, ModelSpec, Psi0Preset,
        RateShape,
    };
    use approx::assert_relative_eq;

    fn zero_rate_spec() -> ModelSpec {
        let mut s = small_spec(0.1);
        s.rate.clamp_level = 0.0;
        s.rate.sup_bound = 0.0;
        s
    }

    #[test]
    fn pure_transport_preserves_mass_and_mean() {
        // no spiking, no deposits, alpha = 0: mass and global mean conserved
        let mut spec = zero_rate_spec();
        spec.alpha = 0.0;
        let grid = LimitGrid::new(&spec, 0.5).unwrap();
        let f0 = DensityField::from_initial(&spec, &grid, 129);
        let mut f = f0.clone();
        for _ in 0..8 {
            f = rho_delta_step(&f, &grid, &spec.rate, 0.125, 8);
        }
        for (at, at0) in f.per_r.iter().zip(&f0.per_r) {
            assert_relative_eq!(at.mass(), at0.mass(), epsilon = 1e-9);
            assert_relative_eq!(at.moment(|u| u), at0.moment(|u| u), epsilon = 1e-9);
        }
    }

    #[test]
    fn synchronized_narrow_data_stays_put_in_the_weak_sense() {
        // alpha = 0 and all mass near one value: Lipschitz pairings move
        // at most by the support width
        let spec = {
            let mut s = ModelSpec::build(
                build_mesh(0.1).unwrap(),
                0.0,
                Kernel::new(KernelPreset::Constant { value: 0.5 }, true),
                Kernel::new(KernelPreset::Constant { value: 1.0 }, true),
                clamp_rate(RateShape::Linear, 2.0).unwrap(),
                InitialDensity::new(Psi0Preset::Narrow { center: 0.8, width: 0.02 }),
            )
            .unwrap();
            s.rate.clamp_level = 0.0;
            s.rate.sup_bound = 0.0;
            s
        };
        let grid = LimitGrid::new(&spec, 0.5).unwrap();
        let f0 = DensityField::from_initial(&spec, &grid, 513);
        let mut f = f0.clone();
        for _ in 0..4 {
            f = rho_delta_step(&f, &grid, &spec.rate, 0.25, 8);
        }
        for (at, at0) in f.per_r.iter().zip(&f0.per_r) {
            assert_relative_eq!(at.mass(), at0.mass(), epsilon = 1e-9);
            let g = |u: f64| (2.0 * u).sin();
            assert!(
                (at.moment(g) - at0.moment(g)).abs() <= 2.0 * 0.02,
                "pairing moved more than the support width allows"
            );
        }
    }

    #[test]
    fn spike_time_endpoints() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let f = DensityField::from_initial(&spec, &grid, 257);
        let delta = 0.125;
        // t(0) = 0
        let t0 = spike_time_of_potential(&f, &grid, &spec.rate, 3, 0.0, delta).unwrap();
        assert!(t0.abs() < 1e-9, "t(0) = {t0}");
        // t(x_n^-) -> delta: evaluate just below the shock foot
        let next = rho_delta_step(&f, &grid, &spec.rate, delta, 8);
        let x = next.per_r[3].ustar;
        let t1 =
            spike_time_of_potential(&f, &grid, &spec.rate, 3, x * (1.0 - 1e-9), delta).unwrap();
        assert!((t1 - delta).abs() < 1e-4 * delta, "t(x-) = {t1} vs {delta}");
        // above the bracket: rejected
        assert!(spike_time_of_potential(&f, &grid, &spec.rate, 3, x * 1.5, delta).is_err());
    }

    #[test]
    fn one_step_vs_two_half_steps_is_first_order() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let f0 = DensityField::from_initial(&spec, &grid, 257);
        let l1_of = |delta: f64, steps: usize| {
            let mut f = f0.clone();
            for _ in 0..steps {
                f = rho_delta_step(&f, &grid, &spec.rate, delta, 16);
            }
            f
        };
        let coarse = l1_of(0.25, 1);
        let fine = l1_of(0.125, 2);
        let finer = l1_of(0.0625, 4);
        let d1 = l1_distance_fields(&coarse, &fine);
        let d2 = l1_distance_fields(&fine, &finer);
        assert!(d1 > 0.0);
        let ratio = d2 / d1;
        assert!((0.25..0.8).contains(&ratio), "halving delta gave ratio {ratio}");
    }

    #[test]
    fn masses_stay_normalized_across_steps() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let mut f = DensityField::from_initial(&spec, &grid, 257);
        for _ in 0..16 {
            f = rho_delta_step(&f, &grid, &spec.rate, 0.0625, 8);
            for d in f.mass_defects() {
                assert!(d < 2e-4, "mass defect {d}");
            }
            for at in &f.per_r {
                assert!(at.lower.v.iter().all(|&x| x >= 0.0));
                assert!(at.upper.v.iter().all(|&x| x >= 0.0));
                // support stays inside the deposit-bounded corridor
                assert!(at.support_end() <= 1.0 + f.time * 2.0 * 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn solver_levels_converge() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let f0 = DensityField::from_initial(&spec, &grid, 257);
        let sol = solve_pde(&f0, &grid, &spec.rate, 0.5, 0.0625, 3, 8).unwrap();
        assert!(sol.converged, "level gaps: {:?}", sol.level_gaps);
        assert_eq!(sol.levels.len(), 3);
        assert_relative_eq!(sol.finest().delta, 0.0625);
        assert!(sol.finest().field_at(0.5).is_some());
        assert!(sol.scheme_error() < sol.level_gaps[0]);
    }

    #[test]
    fn solver_rejects_non_dyadic_horizon() {
        let spec = small_spec(0.1);
        let grid = LimitGrid::new(&spec, 0.25).unwrap();
        let f0 = DensityField::from_initial(&spec, &grid, 65);
        assert!(solve_pde(&f0, &grid, &spec.rate, 0.3, 0.0625, 2, 4).is_err());
    }
}
