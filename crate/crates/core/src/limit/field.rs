//! Density fields on the square-center grid, split at the moving shock.

use super::curve::Curve;
use crate::model::ModelSpec;
use crate::partition::{build_center_tables, PartitionError};

/// Square-center grid with frozen kernel tables for the deterministic side.
#[derive(Debug, Clone)]
pub struct LimitGrid {
    pub ell: f64,
    pub side: usize,
    pub centers: Vec<(f64, f64)>,
    pub alpha: f64,
    /// Per-square averaging rate (row sums of the raw gap kernel, ℓ-grid).
    pub lambda: Vec<f64>,
    /// Normalized gap weights `[target m][source m']`, ℓ² row sums exactly 1.
    pub gap_norm: Vec<f64>,
    /// Synaptic kernel `[source m'][target m]`.
    pub syn: Vec<f64>,
}

impl LimitGrid {
    pub fn new(spec: &ModelSpec, ell: f64) -> Result<Self, PartitionError> {
        let side = {
            let inv = 1.0 / ell;
            let r = inv.round();
            if !(r >= 1.0 && (inv - r).abs() <= 1e-9 * r) {
                return Err(PartitionError::BadEll(inv));
            }
            r as usize
        };
        let mut centers = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                centers.push(((col as f64 + 0.5) * ell, (row as f64 + 0.5) * ell));
            }
        }
        let tables = build_center_tables(spec, &centers, ell);
        Ok(LimitGrid {
            ell,
            side,
            centers,
            alpha: spec.alpha,
            lambda: tables.lambda,
            gap_norm: tables.gap_norm,
            syn: tables.syn,
        })
    }

    pub fn square_count(&self) -> usize {
        self.centers.len()
    }
}

/// The density section at one square: reset-born mass on `[0, u*]` (last
/// node carries the left limit at the shock), initial-data mass on
/// `[u*, R]` (first node carries the right limit), plus the derived scalars.
#[derive(Debug, Clone, Default)]
pub struct FieldAt {
    pub lower: Curve,
    pub upper: Curve,
    pub ustar: f64,
    pub ubar: f64,
    pub p: f64,
    pub q: f64,
}

impl FieldAt {
    pub fn eval(&self, u: f64) -> f64 {
        if u < self.ustar {
            self.lower.eval(u)
        } else if u > self.ustar {
            self.upper.eval(u)
        } else if !self.upper.is_empty() {
            self.upper.eval(u)
        } else {
            self.lower.eval(u)
        }
    }

    pub fn mass(&self) -> f64 {
        self.lower.integrate() + self.upper.integrate()
    }

    pub fn moment<F: Fn(f64) -> f64 + Copy>(&self, f: F) -> f64 {
        self.lower.moment(f) + self.upper.moment(f)
    }

    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        self.lower.mass_between(a, b) + self.upper.mass_between(a, b)
    }

    /// Right edge of the support.
    pub fn support_end(&self) -> f64 {
        if self.upper.is_empty() {
            if self.lower.is_empty() {
                0.0
            } else {
                self.lower.last_u()
            }
        } else {
            self.upper.last_u()
        }
    }

    /// Value at `0⁺`.
    pub fn boundary_value(&self) -> f64 {
        if !self.lower.is_empty() {
            self.lower.v[0]
        } else if !self.upper.is_empty() {
            self.upper.v[0]
        } else {
            0.0
        }
    }

    /// Jump of the density across the shock (right minus left limit); zero
    /// while the reset-born region is still empty.
    pub fn shock_jump(&self) -> f64 {
        if self.lower.is_empty() || self.upper.is_empty() {
            return 0.0;
        }
        self.upper.v[0] - *self.lower.v.last().unwrap()
    }
}

/// The density field at one time on the square grid.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub time: f64,
    pub ell: f64,
    pub side: usize,
    pub per_r: Vec<FieldAt>,
}

impl DensityField {
    /// Sample the initial law on a uniform grid over its support.
    pub fn from_initial(spec: &ModelSpec, grid: &LimitGrid, ugrid: usize) -> Self {
        let r0 = spec.psi0.support_bound;
        let n = ugrid.max(2);
        let h = r0 / (n - 1) as f64;
        let mut per_r = Vec::with_capacity(grid.square_count());
        for m in 0..grid.square_count() {
            let c = grid.centers[m];
            let u: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
            let v: Vec<f64> = u.iter().map(|&x| spec.psi0.evaluate(x, c)).collect();
            per_r.push(FieldAt {
                lower: Curve::default(),
                upper: Curve::new(u, v),
                ustar: 0.0,
                ubar: 0.0,
                p: 0.0,
                q: 0.0,
            });
        }
        let mut field = DensityField { time: 0.0, ell: grid.ell, side: grid.side, per_r };
        field.refresh_scalars(spec_rate(spec), grid);
        field
    }

    /// Section index of the square containing `r`.
    pub fn square_of(&self, r: (f64, f64)) -> usize {
        let col = ((r.0 / self.ell).floor() as usize).min(self.side - 1);
        let row = ((r.1 / self.ell).floor() as usize).min(self.side - 1);
        row * self.side + col
    }

    pub fn eval_at(&self, u: f64, r: (f64, f64)) -> f64 {
        self.per_r[self.square_of(r)].eval(u)
    }

    /// Recompute `ū`, `p`, `q` from the current sections. `p` here is the
    /// instantaneous deposit rate `∫∫ a(r',r) φ(u,r') ρ(u,r') du dr'`.
    pub fn refresh_scalars(&mut self, rate: &crate::model::RateFunction, grid: &LimitGrid) {
        let mm = grid.square_count();
        let ell2 = grid.ell * grid.ell;
        let m1: Vec<f64> = (0..mm).map(|m| self.per_r[m].moment(|u| u)).collect();
        let qv: Vec<f64> = (0..mm)
            .map(|m| {
                let c = grid.centers[m];
                self.per_r[m].moment(|u| rate.evaluate(u, c))
            })
            .collect();
        for m in 0..mm {
            let gap_row = &grid.gap_norm[m * mm..(m + 1) * mm];
            self.per_r[m].ubar = ell2 * gap_row.iter().zip(&m1).map(|(b, x)| b * x).sum::<f64>();
            self.per_r[m].p =
                ell2 * (0..mm).map(|mp| grid.syn[mp * mm + m] * qv[mp]).sum::<f64>();
            self.per_r[m].q = qv[m];
        }
    }

    pub fn mass_defects(&self) -> Vec<f64> {
        self.per_r.iter().map(|f| (f.mass() - 1.0).abs()).collect()
    }
}

fn spec_rate(spec: &ModelSpec) -> &crate::model::RateFunction {
    &spec.rate
}

/// `L¹(du dr)` distance of two fields: on the finer of the two square grids,
/// the node sets are merged per square and the absolute difference is
/// integrated with interior samples (jumps at nodes stay unambiguous), then
/// weighted by the square area.
pub fn l1_distance_fields(a: &DensityField, b: &DensityField) -> f64 {
    let (fine, coarse) = if a.side >= b.side { (a, b) } else { (b, a) };
    let ell2 = fine.ell * fine.ell;
    let mut total = 0.0;
    for row in 0..fine.side {
        for col in 0..fine.side {
            let center = (
                (col as f64 + 0.5) * fine.ell,
                (row as f64 + 0.5) * fine.ell,
            );
            let fa = &fine.per_r[row * fine.side + col];
            let fb = &coarse.per_r[coarse.square_of(center)];
            let mut grid: Vec<f64> = Vec::new();
            for c in [&fa.lower, &fa.upper, &fb.lower, &fb.upper] {
                grid.extend_from_slice(&c.u);
            }
            grid.push(fa.ustar);
            grid.push(fb.ustar);
            grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
            grid.dedup();
            let mut s = 0.0;
            for w in grid.windows(2) {
                let du = w[1] - w[0];
                if du > 0.0 {
                    let d = |x: f64| (fa.eval(x) - fb.eval(x)).abs();
                    let mid = 0.5 * (w[0] + w[1]);
                    let quarter = 0.25 * (3.0 * w[0] + w[1]);
                    let three_quarter = 0.25 * (w[0] + 3.0 * w[1]);
                    s += du * (d(quarter) + d(mid) + d(three_quarter)) / 3.0;
                }
            }
            total += ell2 * s;
        }
    }
    total
}
