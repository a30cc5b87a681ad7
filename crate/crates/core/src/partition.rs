//! The four discretization scales and the square-center kernel tables shared
//! by the auxiliary process and the deterministic recursions.

use serde::Serialize;
use thiserror::Error;

use crate::model::ModelSpec;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("1/ell = {0} must be a positive integer so squares tile [0,1)^2")]
    BadEll(f64),
    #[error("delta/tau = {0} must be a positive integer so time bins tile [0,delta)")]
    BadTau(f64),
    #[error("r0/ebin = {0} must be a positive integer so potential bins tile [0,r0]")]
    BadEbin(f64),
    #[error("ell/epsilon = {0} must be a positive integer so squares contain whole sites")]
    EllNotMultipleOfEpsilon(f64),
    #[error("potential {0} exceeds the initial support bound {1}")]
    AboveSupport(f64, f64),
    #[error("delta must be positive, got {0}")]
    BadDelta(f64),
}

fn as_positive_integer(x: f64) -> Option<usize> {
    if !(x > 0.0) {
        return None;
    }
    let r = x.round();
    if r >= 1.0 && (x - r).abs() <= 1e-9 * r {
        Some(r as usize)
    } else {
        None
    }
}

/// The (δ, ℓ, E, τ) scales with their derived squares, time bins and
/// potential bins.
///
/// Squares `C_m` are half-open with centers `i_m`, row-major like the mesh.
/// Time bins count backwards: `J_h = [δ-hτ, δ-(h-1)τ)`, so `h = 1` is the bin
/// ending at δ. Potential bins are `I_k = [(k-1)E, kE)` with centers `E_k`.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionSpec {
    pub delta: f64,
    pub ell: f64,
    pub ebin: f64,
    pub tau: f64,
    pub r0: f64,
    pub side: usize,
    pub time_bins: usize,
    pub pot_bins: usize,
    pub centers: Vec<(f64, f64)>,
}

impl PartitionSpec {
    pub fn new(delta: f64, ell: f64, ebin: f64, tau: f64, r0: f64) -> Result<Self, PartitionError> {
        if !(delta > 0.0) {
            return Err(PartitionError::BadDelta(delta));
        }
        let side = as_positive_integer(1.0 / ell).ok_or(PartitionError::BadEll(1.0 / ell))?;
        let time_bins = as_positive_integer(delta / tau).ok_or(PartitionError::BadTau(delta / tau))?;
        let pot_bins = as_positive_integer(r0 / ebin).ok_or(PartitionError::BadEbin(r0 / ebin))?;
        let mut centers = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                centers.push(((col as f64 + 0.5) * ell, (row as f64 + 0.5) * ell));
            }
        }
        Ok(PartitionSpec { delta, ell, ebin, tau, r0, side, time_bins, pot_bins, centers })
    }

    /// Squares must contain whole mesh cells.
    pub fn validate_mesh(&self, epsilon: f64) -> Result<(), PartitionError> {
        as_positive_integer(self.ell / epsilon)
            .map(|_| ())
            .ok_or(PartitionError::EllNotMultipleOfEpsilon(self.ell / epsilon))
    }

    pub fn square_count(&self) -> usize {
        self.side * self.side
    }

    pub fn center(&self, m: usize) -> (f64, f64) {
        self.centers[m]
    }

    /// Index of the half-open square containing `r`.
    pub fn square_of(&self, r: (f64, f64)) -> usize {
        let col = ((r.0 / self.ell).floor() as usize).min(self.side - 1);
        let row = ((r.1 / self.ell).floor() as usize).min(self.side - 1);
        row * self.side + col
    }

    /// Bin `h` (1-based) with elapsed time `s ∈ J_h`; exact bin edges go to
    /// the later (smaller-h) bin consistently with the half-open intervals.
    pub fn time_bin_of_elapsed(&self, s: f64) -> usize {
        debug_assert!((0.0..self.delta).contains(&s));
        let idx = (s / self.tau).floor() as usize;
        (self.time_bins - idx.min(self.time_bins - 1)).max(1)
    }

    /// 1-based potential bin of `u ∈ [0, r0]`; boundary values go to the
    /// upper bin, the top edge `r0` to the last bin.
    pub fn pot_bin_of(&self, u: f64) -> Result<usize, PartitionError> {
        if u < 0.0 || u > self.r0 * (1.0 + 1e-12) {
            return Err(PartitionError::AboveSupport(u, self.r0));
        }
        Ok(((u / self.ebin).floor() as usize).min(self.pot_bins - 1) + 1)
    }

    /// Center `E_k` of potential bin `k` (1-based).
    pub fn level_center(&self, k: usize) -> f64 {
        (k as f64 - 0.5) * self.ebin
    }
}

/// Kernel and rate data frozen at square centers: the per-square averaging
/// rate, the row-normalized gap weights and the synaptic matrix.
///
/// Rows use the smooth kernel values (the diagonal of an integral is a null
/// set) and are renormalized so `ℓ² Σ_m' gap_norm[m][m'] = 1` exactly; a
/// synchronized configuration is then an exact fixed point of the frozen
/// flows.
#[derive(Debug, Clone)]
pub struct CenterTables {
    /// `λ_m = ℓ² Σ_m' raw_b(i_m, i_m')`, zero when gap junctions are off.
    pub lambda: Vec<f64>,
    /// Normalized gap weights, row-major `[target m][source m']`.
    pub gap_norm: Vec<f64>,
    /// Synaptic kernel at center pairs, row-major `[source m'][target m]`.
    pub syn: Vec<f64>,
}

pub fn build_center_tables(spec: &ModelSpec, centers: &[(f64, f64)], ell: f64) -> CenterTables {
    let mm = centers.len();
    let ell2 = ell * ell;
    let mut lambda = vec![0.0; mm];
    let mut gap_norm = vec![0.0; mm * mm];
    let mut syn = vec![0.0; mm * mm];
    for m in 0..mm {
        let cm = centers[m];
        for mp in 0..mm {
            let cmp = centers[mp];
            syn[mp * mm + m] = spec.synaptic.smooth_value(cmp, cm);
            if !spec.gap_raw.is_none() {
                gap_norm[m * mm + mp] = spec.gap_raw.smooth_value(cm, cmp);
            }
        }
        if !spec.gap_raw.is_none() {
            let row_sum: f64 = gap_norm[m * mm..(m + 1) * mm].iter().sum();
            lambda[m] = ell2 * row_sum;
            for v in &mut gap_norm[m * mm..(m + 1) * mm] {
                *v /= lambda[m];
            }
        }
    }
    CenterTables { lambda, gap_norm, syn }
}

/// The frozen-average relaxation `Φ_{t,ȳ}(y)`: exponential pull of `y`
/// toward `ȳ` at rate `α+λ` for a time `t`, with the gap share `λ/(α+λ)`.
pub fn relax(t: f64, alpha: f64, lambda: f64, ybar: f64, y: f64) -> f64 {
    let rate = alpha + lambda;
    if rate == 0.0 {
        return y;
    }
    let decay = (-t * rate).exp();
    decay * y + lambda / rate * (1.0 - decay) * ybar
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn partition_divisibility() {
        assert!(PartitionSpec::new(0.25, 0.2, 0.25, 0.0625, 1.0).is_ok());
        assert!(PartitionSpec::new(0.3, 0.2, 0.25, 0.2, 1.0).is_err()); // tau
        assert!(PartitionSpec::new(0.25, 0.3, 0.25, 0.0625, 1.0).is_err()); // ell
        assert!(PartitionSpec::new(0.25, 0.2, 0.3, 0.0625, 1.0).is_err()); // ebin
    }

    #[test]
    fn squares_tile_and_contain_whole_sites() {
        let p = PartitionSpec::new(0.25, 0.2, 0.25, 0.0625, 1.0).unwrap();
        assert_eq!(p.square_count(), 25);
        p.validate_mesh(0.05).unwrap();
        p.validate_mesh(0.2).unwrap();
        assert!(p.validate_mesh(0.15).is_err());
        // every mesh site lands in exactly one square, and counts are equal
        let mesh = crate::model::build_mesh(0.05).unwrap();
        let mut counts = vec![0usize; 25];
        for &s in &mesh.sites {
            counts[p.square_of(s)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 16));
    }

    #[test]
    fn time_bins_count_backwards() {
        let p = PartitionSpec::new(0.2, 0.5, 0.25, 0.05, 1.0).unwrap();
        assert_eq!(p.time_bins, 4);
        assert_eq!(p.time_bin_of_elapsed(0.0), 4); // first elapsed bin is h = H
        assert_eq!(p.time_bin_of_elapsed(0.049), 4);
        assert_eq!(p.time_bin_of_elapsed(0.05), 3); // edge goes to the later bin
        assert_eq!(p.time_bin_of_elapsed(0.19), 1);
    }

    #[test]
    fn potential_bins_half_open() {
        let p = PartitionSpec::new(0.25, 0.5, 0.5, 0.0625, 1.0).unwrap();
        assert_eq!(p.pot_bin_of(0.3).unwrap(), 1);
        assert_relative_eq!(p.level_center(1), 0.25);
        // boundary goes up
        assert_eq!(p.pot_bin_of(0.5).unwrap(), 2);
        assert_relative_eq!(p.level_center(2), 0.75);
        assert_eq!(p.pot_bin_of(1.0).unwrap(), 2); // top edge clamps to last bin
        assert!(p.pot_bin_of(1.5).is_err());
    }

    #[test]
    fn center_tables_rows_sum_to_one() {
        let spec = crate::model::testutil::small_spec(0.1);
        let p = PartitionSpec::new(0.25, 0.2, 0.25, 0.0625, 1.0).unwrap();
        let t = build_center_tables(&spec, &p.centers, p.ell);
        let ell2 = 0.04;
        for m in 0..25 {
            let row: f64 = t.gap_norm[m * 25..(m + 1) * 25].iter().sum();
            assert_relative_eq!(ell2 * row, 1.0, epsilon = 1e-12);
        }
        // constant raw kernel of value 1: lambda = 1 everywhere (smooth diagonal)
        for &l in &t.lambda {
            assert_relative_eq!(l, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn relax_identities() {
        // t = 0 is the identity
        assert_eq!(relax(0.0, 0.3, 1.2, 0.9, 0.4), 0.4);
        // alpha = 0: the average is a fixed point
        assert_relative_eq!(relax(0.7, 0.0, 1.2, 0.9, 0.9), 0.9, epsilon = 1e-15);
        // lambda = 0: pure leak
        assert_relative_eq!(relax(1.0, 1.0, 0.0, 5.0, 1.0), (-1.0f64).exp(), epsilon = 1e-15);
    }
}
