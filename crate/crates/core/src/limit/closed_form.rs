//! Characteristic curves of the transport equation, the closed-form density
//! they carry, and the weak-form residual probe.

use super::field::{DensityField, LimitGrid};
use super::pde::Trajectory;
use crate::model::{ModelSpec, RateFunction};

/// Time-sampled drift data per square: `g(t) = λ_m ū_t + p_t` on the step
/// grid, plus the scalars needed for the boundary law. Values interpolate
/// linearly between samples; the exponential-kernel integrals are evaluated
/// exactly per segment.
#[derive(Debug, Clone)]
pub struct CharacteristicPaths {
    pub times: Vec<f64>,
    pub alpha: f64,
    pub lambda: Vec<f64>,
    /// `g[m][i] = λ_m ū + p` at `times[i]`.
    pub g: Vec<Vec<f64>>,
    pub ubar: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    /// Cumulative `J[m][i] = ∫_0^{t_i} e^{(α+λ_m) h} g(h) dh`, exact per
    /// linear segment.
    cum_j: Vec<Vec<f64>>,
}

impl CharacteristicPaths {
    pub fn from_trajectory(traj: &Trajectory, grid: &LimitGrid) -> Self {
        let times: Vec<f64> = traj.fields.iter().map(|f| f.time).collect();
        let mm = grid.square_count();
        let pick = |f: &DensityField, m: usize| {
            let at = &f.per_r[m];
            (at.ubar, at.p, at.q)
        };
        let mut g = vec![Vec::new(); mm];
        let mut ubar = vec![Vec::new(); mm];
        let mut p = vec![Vec::new(); mm];
        let mut q = vec![Vec::new(); mm];
        for f in &traj.fields {
            for m in 0..mm {
                let (u, pp, qq) = pick(f, m);
                g[m].push(grid.lambda[m] * u + pp);
                ubar[m].push(u);
                p[m].push(pp);
                q[m].push(qq);
            }
        }
        let mut cum_j = vec![vec![0.0]; mm];
        for m in 0..mm {
            let c = grid.alpha + grid.lambda[m];
            for i in 1..times.len() {
                let inc = segment_j(c, times[i - 1], times[i], g[m][i - 1], g[m][i], times[i]);
                // segment_j integrates e^{c(h - t_ref)}; accumulate in the
                // absolute frame e^{c h} instead
                let abs_inc = inc * (c * times[i]).exp();
                let prev = cum_j[m][i - 1];
                cum_j[m].push(prev + abs_inc);
            }
        }
        CharacteristicPaths { times, alpha: grid.alpha, lambda: grid.lambda.clone(), g, ubar, p, q, cum_j }
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        // segment index and fraction for a time inside the grid
        let n = self.times.len();
        if t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        (i, w)
    }

    pub fn g_at(&self, m: usize, t: f64) -> f64 {
        let (i, w) = self.locate(t);
        self.g[m][i] * (1.0 - w) + self.g[m][i + 1] * w
    }

    pub fn scalar_at(&self, values: &[Vec<f64>], m: usize, t: f64) -> f64 {
        let (i, w) = self.locate(t);
        values[m][i] * (1.0 - w) + values[m][i + 1] * w
    }

    /// `J(t) = ∫_0^t e^{(α+λ_m) h} g(h) dh`.
    fn j_at(&self, m: usize, t: f64) -> f64 {
        let c = self.alpha + self.lambda[m];
        let (i, w) = self.locate(t);
        if w == 0.0 {
            return self.cum_j[m][i];
        }
        let t0 = self.times[i];
        let t1 = self.times[i + 1];
        let tm = t0 + w * (t1 - t0);
        let gm = self.g[m][i] * (1.0 - w) + self.g[m][i + 1] * w;
        self.cum_j[m][i] + segment_j(c, t0, tm, self.g[m][i], gm, tm) * (c * tm).exp()
    }

    /// `I_{s,t} = ∫_s^t e^{-(α+λ_m)(t-h)} g(h) dh`.
    pub fn kernel_integral(&self, m: usize, s: f64, t: f64) -> f64 {
        let c = self.alpha + self.lambda[m];
        (-c * t).exp() * (self.j_at(m, t) - self.j_at(m, s))
    }
}

/// `∫_a^b e^{-c(t_ref - h)} g(h) dh` for linear `g` on `[a, b]`.
fn segment_j(c: f64, a: f64, b: f64, ga: f64, gb: f64, t_ref: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if c == 0.0 {
        return 0.5 * (ga + gb) * (b - a);
    }
    let slope = (gb - ga) / (b - a);
    // ∫ e^{c(h-t_ref)} (ga + slope (h-a)) dh, antiderivative
    // e^{c(h-t_ref)} [ (ga + slope (h-a))/c - slope/c² ]
    let f = |h: f64, val: f64| (c * (h - t_ref)).exp() * (val / c - slope / (c * c));
    f(b, gb) - f(a, ga)
}

/// The characteristic position `T_{s,t}(u, r_m)`: exponential contraction of
/// `u` plus the accumulated drift.
pub fn characteristic_flow(paths: &CharacteristicPaths, m: usize, s: f64, t: f64, u: f64) -> f64 {
    let c = paths.alpha + paths.lambda[m];
    (-c * (t - s)).exp() * u + paths.kernel_integral(m, s, t)
}

/// The density the characteristics carry.
///
/// Above the shock `T_{0,t}(0)` it is the initial density pulled back along
/// the flow, damped by the accumulated spiking and inflated by the
/// accumulated volume contraction. Below, it is the boundary law emitted when
/// the characteristic through `(u, t)` left the origin, transported the same
/// way.
pub fn closed_form_density(
    paths: &CharacteristicPaths,
    spec: &ModelSpec,
    grid: &LimitGrid,
    m: usize,
    u: f64,
    t: f64,
) -> f64 {
    let rate = &spec.rate;
    let c_m = grid.centers[m];
    let cc = paths.alpha + paths.lambda[m];
    let ustar = paths.kernel_integral(m, 0.0, t);
    let quad = 128usize;
    if u >= ustar {
        // pull back to time 0
        let v0 = (u - ustar) * (cc * t).exp();
        if v0 > spec.psi0.support_bound {
            return 0.0;
        }
        // ∫_0^t φ(T^{-1}_{s,t}(u), c_m) ds by composite trapezoid
        let mut acc = 0.0;
        let h = t / quad as f64;
        for i in 0..=quad {
            let s = i as f64 * h;
            let back = (u - paths.kernel_integral(m, s, t)) * (cc * (t - s)).exp();
            let w = if i == 0 || i == quad { 0.5 } else { 1.0 };
            acc += w * rate.evaluate(back.max(0.0), c_m);
        }
        acc *= h;
        spec.psi0.evaluate(v0, c_m) * (-(acc - cc * t)).exp()
    } else {
        // emission time s with T_{s,t}(0) = u; the integral is decreasing in s
        let (mut lo, mut hi) = (0.0, t);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if paths.kernel_integral(m, mid, t) > u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = 0.5 * (lo + hi);
        let ubar_s = paths.scalar_at(&paths.ubar, m, s);
        let p_s = paths.scalar_at(&paths.p, m, s);
        let q_s = paths.scalar_at(&paths.q, m, s);
        let emitted = q_s / (paths.lambda[m] * ubar_s + p_s);
        let mut acc = 0.0;
        let h = (t - s) / quad as f64;
        for i in 0..=quad {
            let hh = s + i as f64 * h;
            let pos = paths.kernel_integral(m, s, hh);
            let w = if i == 0 || i == quad { 0.5 } else { 1.0 };
            acc += w * rate.evaluate(pos, c_m);
        }
        acc *= h;
        emitted * (-(acc - cc * (t - s))).exp()
    }
}

// ---------------------------------------------------------------------------
// Weak-form residual
// ---------------------------------------------------------------------------

/// Smooth test functions with analytic derivatives for the weak form.
#[derive(Debug, Clone, Copy)]
pub enum WeakTestFn {
    One,
    Linear,
    Quadratic,
    Cubic,
    Cos { k: f64 },
    Sin { k: f64 },
    ExpNeg,
    Ramp { scale: f64 },
}

impl WeakTestFn {
    /// Eight probes spanning constants, moments and oscillations on
    /// `[0, umax]`.
    pub fn library(umax: f64) -> Vec<WeakTestFn> {
        let k1 = std::f64::consts::PI / umax;
        vec![
            WeakTestFn::One,
            WeakTestFn::Linear,
            WeakTestFn::Quadratic,
            WeakTestFn::Cubic,
            WeakTestFn::Cos { k: k1 },
            WeakTestFn::Sin { k: k1 },
            WeakTestFn::ExpNeg,
            WeakTestFn::Ramp { scale: umax },
        ]
    }

    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            WeakTestFn::One => 1.0,
            WeakTestFn::Linear => u,
            WeakTestFn::Quadratic => u * u,
            WeakTestFn::Cubic => u * u * u,
            WeakTestFn::Cos { k } => (k * u).cos(),
            WeakTestFn::Sin { k } => (k * u).sin(),
            WeakTestFn::ExpNeg => (-u).exp(),
            WeakTestFn::Ramp { scale } => u / (u + scale),
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            WeakTestFn::One => 0.0,
            WeakTestFn::Linear => 1.0,
            WeakTestFn::Quadratic => 2.0 * u,
            WeakTestFn::Cubic => 3.0 * u * u,
            WeakTestFn::Cos { k } => -k * (k * u).sin(),
            WeakTestFn::Sin { k } => k * (k * u).cos(),
            WeakTestFn::ExpNeg => -(-u).exp(),
            WeakTestFn::Ramp { scale } => scale / ((u + scale) * (u + scale)),
        }
    }
}

/// Defect of the weak formulation at an interior step time: the centered
/// time derivative of `∫ φ ρ du` minus the transport, boundary and killing
/// terms, maximized over the square grid.
pub fn weak_residual(
    traj: &Trajectory,
    grid: &LimitGrid,
    rate: &RateFunction,
    test: &WeakTestFn,
    t: f64,
) -> f64 {
    let delta = traj.delta;
    let i = (t / delta).round() as usize;
    assert!(
        i >= 1 && i + 1 < traj.fields.len(),
        "need interior step time with both neighbors"
    );
    let (before, at, after) = (&traj.fields[i - 1], &traj.fields[i], &traj.fields[i + 1]);
    let mut worst: f64 = 0.0;
    for m in 0..grid.square_count() {
        let c = grid.centers[m];
        let lam = grid.lambda[m];
        let pairing = |f: &DensityField| f.per_r[m].moment(|u| test.eval(u));
        let ddt = (pairing(after) - pairing(before)) / (2.0 * delta);
        let sec = &at.per_r[m];
        let transport = sec.moment(|u| {
            test.derivative(u) * (-grid.alpha * u - lam * (u - sec.ubar) + sec.p)
        });
        let boundary = test.eval(0.0) * sec.q;
        let killing = sec.moment(|u| rate.evaluate(u, c) * test.eval(u));
        worst = worst.max((ddt - transport - boundary + killing).abs());
    }
    worst
}
