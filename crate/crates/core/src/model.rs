//! Problem instance: mesh, interaction kernels, firing rate, leak and
//! initial law, with the structural validation the dynamics relies on.
//!
//! Kernels and rates are named presets with parameters so a whole experiment
//! is serializable. All model objects are immutable after construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microsim::NetworkState;
use crate::rng::stream_rng;

/// Number of points the inverse-CDF sampler and u-quadratures use.
pub const U_GRID: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("1/epsilon = {0} is not a positive integer; the mesh must tile [0,1)^2 exactly")]
    BadEpsilon(f64),
    #[error("mesh of {0} sites exceeds the dense-matrix guard ({1})")]
    TooManySites(usize, usize),
    #[error("site {0} has an all-zero gap-junction row; every neuron needs a positive averaging rate")]
    IsolatedSite(usize),
    #[error("rate preset produced a negative value {value} at u = {u}")]
    NegativeRate { u: f64, value: f64 },
    #[error("clamp level must be positive, got {0}")]
    BadClampLevel(f64),
    #[error("initial density does not integrate to 1 (got {0}) on [0, R0]")]
    BadDensityMass(f64),
    #[error("no boundary-compatible linear density exists for these parameters")]
    NoCompatibleDensity,
    #[error("leak rate alpha must be positive when gap junctions are disabled")]
    NoContraction,
}

/// Largest site count for which dense N x N kernel matrices are built.
pub const MAX_SITES: usize = 4096;

// ---------------------------------------------------------------------------
// Mesh
// ---------------------------------------------------------------------------

/// The square mesh of `1/epsilon^2` neuron positions in `[0,1)^2`.
///
/// Sites are stored row-major: index `i = row * side + col`, position
/// `(col * eps, row * eps)`. The ordering is part of the contract; event logs
/// and snapshots refer to these indices.
#[derive(Debug, Clone, Serialize)]
pub struct Mesh {
    pub epsilon: f64,
    pub side: usize,
    pub sites: Vec<(f64, f64)>,
}

impl Mesh {
    pub fn count(&self) -> usize {
        self.sites.len()
    }
    pub fn site(&self, i: usize) -> (f64, f64) {
        self.sites[i]
    }
}

/// Build the mesh for spacing `epsilon`; rejects spacings that do not divide 1.
pub fn build_mesh(epsilon: f64) -> Result<Mesh, ModelError> {
    if !(epsilon > 0.0) {
        return Err(ModelError::BadEpsilon(f64::NAN));
    }
    let inv = 1.0 / epsilon;
    let side = inv.round();
    if side < 1.0 || (inv - side).abs() > 1e-9 * side {
        return Err(ModelError::BadEpsilon(inv));
    }
    let side = side as usize;
    let mut sites = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            sites.push((col as f64 * epsilon, row as f64 * epsilon));
        }
    }
    Ok(Mesh { epsilon, side, sites })
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Named spatial kernel shapes. All are nonnegative, symmetric in their
/// arguments and Lipschitz away from the diagonal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum KernelPreset {
    /// Same strength for every ordered pair of distinct positions.
    Constant { value: f64 },
    /// `amplitude * exp(-d^2 / (2 width^2))`.
    Gaussian { amplitude: f64, width: f64 },
    /// `amplitude * (1 + contrast * cos(2π Δx) cos(2π Δy))`; a trigonometric
    /// polynomial, so equispaced grid sums integrate it exactly.
    Cosine { amplitude: f64, contrast: f64 },
    /// Kernel identically zero (used to disable gap junctions).
    None,
}

/// A spatial interaction kernel together with the metric it uses.
#[derive(Debug, Clone, Serialize)]
pub struct Kernel {
    pub preset: KernelPreset,
    pub periodic: bool,
    /// Lipschitz constant of the smooth part, in the chosen metric.
    pub lipschitz_bound: f64,
    pub symmetric: bool,
}

impl Kernel {
    pub fn new(preset: KernelPreset, periodic: bool) -> Self {
        let lipschitz_bound = match preset {
            KernelPreset::Constant { .. } | KernelPreset::None => 0.0,
            KernelPreset::Gaussian { amplitude, width } => {
                // max |d/dd exp(-d^2/2w^2)| = exp(-1/2)/w
                amplitude.abs() * (-0.5f64).exp() / width
            }
            KernelPreset::Cosine { amplitude, contrast } => {
                amplitude.abs() * contrast.abs() * 2.0 * std::f64::consts::PI * 2.0f64.sqrt()
            }
        };
        Kernel { preset, periodic, lipschitz_bound, symmetric: true }
    }

    /// Coordinate differences in the chosen metric.
    fn diff(&self, r: (f64, f64), rp: (f64, f64)) -> (f64, f64) {
        let (mut dx, mut dy) = ((r.0 - rp.0).abs(), (r.1 - rp.1).abs());
        if self.periodic {
            dx = dx.min(1.0 - dx);
            dy = dy.min(1.0 - dy);
        }
        (dx, dy)
    }

    /// Kernel value with the diagonal convention `k(r, r) = 0`.
    pub fn evaluate(&self, r: (f64, f64), rp: (f64, f64)) -> f64 {
        if r == rp {
            return 0.0;
        }
        self.smooth_value(r, rp)
    }

    /// The preset value without the diagonal special case. Quadratures of
    /// integrals use this: the diagonal is a null set of the integral.
    pub fn smooth_value(&self, r: (f64, f64), rp: (f64, f64)) -> f64 {
        let (dx, dy) = self.diff(r, rp);
        match self.preset {
            KernelPreset::None => 0.0,
            KernelPreset::Constant { value } => value,
            KernelPreset::Gaussian { amplitude, width } => {
                let d2 = dx * dx + dy * dy;
                amplitude * (-d2 / (2.0 * width * width)).exp()
            }
            KernelPreset::Cosine { amplitude, contrast } => {
                let tau = 2.0 * std::f64::consts::PI;
                amplitude * (1.0 + contrast * (tau * dx).cos() * (tau * dy).cos())
            }
        }
    }

    /// Sup of the kernel over distinct pairs.
    pub fn sup(&self) -> f64 {
        match self.preset {
            KernelPreset::None => 0.0,
            KernelPreset::Constant { value } => value,
            KernelPreset::Gaussian { amplitude, .. } => amplitude,
            KernelPreset::Cosine { amplitude, contrast } => amplitude * (1.0 + contrast.abs()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.preset, KernelPreset::None)
    }
}

/// Split a raw gap kernel into per-site averaging rates and a normalized
/// kernel matrix: `lambda_i = eps^2 Σ_{j≠i} raw(i,j)` and
/// `btilde(i,j) = raw(i,j) / lambda_i`, so `eps^2 Σ_j btilde(i,j) = 1` per
/// site. Rejects isolated sites (zero rows).
pub fn normalize_gap_kernel(raw: &Kernel, mesh: &Mesh) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let n = mesh.count();
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                matrix[i * n + j] = raw.evaluate(mesh.site(i), mesh.site(j));
            }
        }
    }
    normalize_gap_matrix(&mut matrix, n, mesh.epsilon).map(|lambda| (lambda, matrix))
}

/// Matrix-level normalization; `matrix` is overwritten with the normalized
/// kernel. Normalizing an already-normalized matrix is the identity.
pub fn normalize_gap_matrix(matrix: &mut [f64], n: usize, epsilon: f64) -> Result<Vec<f64>, ModelError> {
    let eps2 = epsilon * epsilon;
    let mut lambda = vec![0.0; n];
    for i in 0..n {
        let row_sum: f64 = matrix[i * n..(i + 1) * n].iter().sum();
        let l = eps2 * row_sum;
        if !(l > 0.0) {
            return Err(ModelError::IsolatedSite(i));
        }
        lambda[i] = l;
        for v in &mut matrix[i * n..(i + 1) * n] {
            *v /= l;
        }
    }
    Ok(lambda)
}

// ---------------------------------------------------------------------------
// Firing rate
// ---------------------------------------------------------------------------

/// Raw (unclamped) rate shapes. All vanish at `u = 0` and increase in `u`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum RateShape {
    /// `u`
    Linear,
    /// `u^exponent`, exponent >= 1
    Power { exponent: f64 },
    /// `scale * (σ(steepness (u - midpoint)) - σ(-steepness midpoint)) / (1 - σ(-steepness midpoint))`
    Sigmoid { scale: f64, midpoint: f64, steepness: f64 },
}

impl RateShape {
    fn raw(&self, u: f64) -> f64 {
        match *self {
            RateShape::Linear => u,
            RateShape::Power { exponent } => u.powf(exponent),
            RateShape::Sigmoid { scale, midpoint, steepness } => {
                let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                let floor = sig(-steepness * midpoint);
                scale * (sig(steepness * (u - midpoint)) - floor) / (1.0 - floor)
            }
        }
    }
}

/// Firing rate: a raw shape frozen at `clamp_level`, position-uniform.
/// Bounded by `sup_bound` and constant above the clamp.
#[derive(Debug, Clone, Serialize)]
pub struct RateFunction {
    pub shape: RateShape,
    pub clamp_level: f64,
    pub sup_bound: f64,
    pub lipschitz_bound: f64,
}

impl RateFunction {
    /// Rate of a neuron at potential `u` and position `r`. Presets do not
    /// vary with `r`; the argument is part of the interface.
    pub fn evaluate(&self, u: f64, _r: (f64, f64)) -> f64 {
        self.shape.raw(u.min(self.clamp_level))
    }
}

/// Freeze a raw rate shape above `clamp_level`. The sup bound is the value at
/// the clamp (rates are increasing); the Lipschitz bound is measured on a
/// dense grid below the clamp.
pub fn clamp_rate(shape: RateShape, clamp_level: f64) -> Result<RateFunction, ModelError> {
    if !(clamp_level > 0.0) {
        return Err(ModelError::BadClampLevel(clamp_level));
    }
    let mut sup: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut prev = shape.raw(0.0);
    if prev != 0.0 {
        return Err(ModelError::NegativeRate { u: 0.0, value: prev });
    }
    let m = 4096;
    let h = clamp_level / m as f64;
    for k in 1..=m {
        let v = shape.raw(k as f64 * h);
        if v < 0.0 {
            return Err(ModelError::NegativeRate { u: k as f64 * h, value: v });
        }
        if v < prev - 1e-12 {
            return Err(ModelError::NegativeRate { u: k as f64 * h, value: v - prev });
        }
        lip = lip.max((v - prev) / h);
        sup = sup.max(v);
        prev = v;
    }
    Ok(RateFunction { shape, clamp_level, sup_bound: sup, lipschitz_bound: lip })
}

// ---------------------------------------------------------------------------
// Initial density
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Psi0Preset {
    /// Uniform on [0, r0].
    Uniform { r0: f64 },
    /// Uniform on [center - width/2, center + width/2]; narrow widths
    /// approximate a synchronized (point-mass) start.
    Narrow { center: f64, width: f64 },
    /// `intercept + slope*u` on [0, r0], slope fixed by normalization.
    Linear { intercept: f64, r0: f64 },
    /// Uniform in u with a position tilt that is linear in r_x and integrates
    /// to zero, so each position keeps total mass one:
    /// `(1 + tilt (r_x - 1/2)(2u/r0 - 1)) / r0`. Requires |tilt| < 2.
    Tilted { r0: f64, tilt: f64 },
    /// Linear density whose intercept is solved so the initial boundary law
    /// holds (the left-compatibility hypothesis); resolved at model build.
    CompatibleLinear { r0: f64 },
}

/// Initial membrane-potential density, compactly supported on [0, R0].
#[derive(Debug, Clone, Serialize)]
pub struct InitialDensity {
    pub preset: Psi0Preset,
    /// Resolved intercept for the compatible-linear preset.
    pub resolved_intercept: Option<f64>,
    pub support_bound: f64,
    pub left_compatible: bool,
}

impl InitialDensity {
    pub fn new(preset: Psi0Preset) -> Self {
        let support_bound = match preset {
            Psi0Preset::Uniform { r0 }
            | Psi0Preset::Linear { r0, .. }
            | Psi0Preset::Tilted { r0, .. }
            | Psi0Preset::CompatibleLinear { r0 } => r0,
            Psi0Preset::Narrow { center, width } => center + width / 2.0,
        };
        InitialDensity {
            preset,
            resolved_intercept: None,
            support_bound,
            left_compatible: false,
        }
    }

    pub fn evaluate(&self, u: f64, r: (f64, f64)) -> f64 {
        if u < 0.0 || u > self.support_bound {
            return 0.0;
        }
        match self.preset {
            Psi0Preset::Uniform { r0 } => 1.0 / r0,
            Psi0Preset::Narrow { center, width } => {
                let lo = center - width / 2.0;
                if u >= lo {
                    1.0 / width
                } else {
                    0.0
                }
            }
            Psi0Preset::Linear { intercept, r0 } => {
                let slope = 2.0 * (1.0 - intercept * r0) / (r0 * r0);
                intercept + slope * u
            }
            Psi0Preset::Tilted { r0, tilt } => {
                (1.0 + tilt * (r.0 - 0.5) * (2.0 * u / r0 - 1.0)) / r0
            }
            Psi0Preset::CompatibleLinear { r0 } => {
                let a = self.resolved_intercept.expect("compatible-linear not resolved");
                let slope = 2.0 * (1.0 - a * r0) / (r0 * r0);
                a + slope * u
            }
        }
    }

    /// Whether the density genuinely varies with position.
    pub fn is_position_dependent(&self) -> bool {
        matches!(self.preset, Psi0Preset::Tilted { .. })
    }

    /// Total mass on [0, R0] at position r, by fine trapezoid quadrature;
    /// the uniform block integrates exactly on its own support.
    pub fn mass(&self, r: (f64, f64)) -> f64 {
        let (lo, hi) = match self.preset {
            Psi0Preset::Narrow { center, width } => (center - width / 2.0, center + width / 2.0),
            _ => (0.0, self.support_bound),
        };
        let n = U_GRID;
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (self.evaluate(lo, r) + self.evaluate(hi, r));
        for k in 1..n {
            s += self.evaluate(lo + k as f64 * h, r);
        }
        s * h
    }
}

// ---------------------------------------------------------------------------
// Model spec
// ---------------------------------------------------------------------------

/// The full problem instance. Matrices are dense and row-major over mesh
/// indices; `gap` is the normalized kernel (`eps^2` row sums are 1 unless gap
/// junctions are disabled), `syn[i*n+j] = a(i, j)` is the raw synaptic kernel
/// at site pairs.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub mesh: Mesh,
    pub alpha: f64,
    pub synaptic: Kernel,
    pub gap_raw: Kernel,
    pub rate: RateFunction,
    pub psi0: InitialDensity,
    pub lambda: Vec<f64>,
    pub gap: Vec<f64>,
    pub syn: Vec<f64>,
}

impl ModelSpec {
    /// Assemble and validate a model. `normalize_gap_kernel` runs here unless
    /// the gap preset is `None`, in which case `lambda` is identically zero
    /// and `alpha > 0` is required so the flow still contracts.
    pub fn build(
        mesh: Mesh,
        alpha: f64,
        synaptic: Kernel,
        gap_raw: Kernel,
        rate: RateFunction,
        mut psi0: InitialDensity,
    ) -> Result<Self, ModelError> {
        let n = mesh.count();
        if n > MAX_SITES {
            return Err(ModelError::TooManySites(n, MAX_SITES));
        }
        let (lambda, gap) = if gap_raw.is_none() {
            if !(alpha > 0.0) {
                return Err(ModelError::NoContraction);
            }
            (vec![0.0; n], vec![0.0; n * n])
        } else {
            normalize_gap_kernel(&gap_raw, &mesh)?
        };
        let mut syn = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    syn[i * n + j] = synaptic.evaluate(mesh.site(i), mesh.site(j));
                }
            }
        }
        if let Psi0Preset::CompatibleLinear { r0 } = psi0.preset {
            let a = solve_compatible_intercept(r0, &rate, &synaptic, &gap_raw)?;
            psi0.resolved_intercept = Some(a);
            psi0.left_compatible = true;
        }
        let mass = psi0.mass(mesh.site(0));
        if (mass - 1.0).abs() > 1e-6 {
            return Err(ModelError::BadDensityMass(mass));
        }
        Ok(ModelSpec { mesh, alpha, synaptic, gap_raw, rate, psi0, lambda, gap, syn })
    }

    pub fn site_count(&self) -> usize {
        self.mesh.count()
    }

    /// Sup of the synaptic kernel (the `a*` of the path-wise bounds).
    pub fn syn_sup(&self) -> f64 {
        self.synaptic.sup()
    }

    /// Largest per-site averaging rate.
    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().cloned().fold(0.0, f64::max)
    }

    /// Default flow substep: fine enough that the frozen-average splitting
    /// error stays first order and small against every relaxation scale.
    pub fn default_substep(&self) -> f64 {
        (0.1 / (self.alpha + self.lambda_max())).min(0.01)
    }

    /// Continuum averaging rate `λ(r) = ∫ raw_b(r, r') dr'`, by equispaced
    /// quadrature (exact for the cosine preset, spectrally accurate for any
    /// smooth periodic kernel).
    pub fn lambda_continuum(&self, r: (f64, f64)) -> f64 {
        if self.gap_raw.is_none() {
            return 0.0;
        }
        let m = 128;
        let h = 1.0 / m as f64;
        let mut s = 0.0;
        for iy in 0..m {
            for ix in 0..m {
                s += self.gap_raw.smooth_value(r, (ix as f64 * h, iy as f64 * h));
            }
        }
        s * h * h
    }
}

/// Solve, by bisection on the intercept, for the linear density
/// `ψ(u) = A + B u` on [0, r0] (B fixed by normalization) whose value at 0
/// matches the initial boundary law `q0 / (λ ū0 + p0)`.
///
/// The model is assumed position-uniform here (constant-preset kernels and a
/// position-free rate), so one scalar equation decides compatibility.
fn solve_compatible_intercept(
    r0: f64,
    rate: &RateFunction,
    synaptic: &Kernel,
    gap_raw: &Kernel,
) -> Result<f64, ModelError> {
    let origin = (0.0, 0.0);
    let a_strength = synaptic.smooth_value(origin, (0.5, 0.5));
    let lambda = {
        // continuum row integral of the raw gap kernel
        let m = 128;
        let h = 1.0 / m as f64;
        let mut s = 0.0;
        for iy in 0..m {
            for ix in 0..m {
                s += gap_raw.smooth_value(origin, (ix as f64 * h, iy as f64 * h));
            }
        }
        s * h * h
    };
    let defect = |a: f64| -> f64 {
        let slope = 2.0 * (1.0 - a * r0) / (r0 * r0);
        let psi = |u: f64| a + slope * u;
        let n = 2048;
        let h = r0 / n as f64;
        let mut q0 = 0.0;
        let mut ubar0 = 0.0;
        for k in 0..=n {
            let u = k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            q0 += w * rate.evaluate(u, origin) * psi(u);
            ubar0 += w * u * psi(u);
        }
        q0 *= h;
        ubar0 *= h;
        let p0 = a_strength * q0;
        a - q0 / (lambda * ubar0 + p0)
    };
    let (mut lo, mut hi) = (0.0, 2.0 / r0);
    let (flo, fhi) = (defect(lo), defect(hi));
    if flo.is_nan() || fhi.is_nan() || flo * fhi > 0.0 {
        return Err(ModelError::NoCompatibleDensity);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if defect(mid) * flo <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverse-CDF sampler for `psi0(·, r)` at one position: tabulated on the
/// fixed grid with linear interpolation, except for the uniform block whose
/// inverse is exact.
pub enum Psi0Sampler {
    Block { lo: f64, width: f64 },
    Table { h: f64, cdf: Vec<f64> },
}

impl Psi0Sampler {
    pub fn new(psi0: &InitialDensity, r: (f64, f64)) -> Self {
        if let Psi0Preset::Narrow { center, width } = psi0.preset {
            return Psi0Sampler::Block { lo: center - width / 2.0, width };
        }
        let h = psi0.support_bound / (U_GRID - 1) as f64;
        let mut cdf = vec![0.0; U_GRID];
        let mut prev = psi0.evaluate(0.0, r);
        for k in 1..U_GRID {
            let v = psi0.evaluate(k as f64 * h, r);
            cdf[k] = cdf[k - 1] + 0.5 * (prev + v) * h;
            prev = v;
        }
        Psi0Sampler::Table { h, cdf }
    }

    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Psi0Sampler::Block { lo, width } => lo + width * rng.random::<f64>(),
            Psi0Sampler::Table { h, cdf } => {
                let q: f64 = rng.random::<f64>() * cdf[U_GRID - 1];
                let mut lo = 0usize;
                let mut hi = U_GRID - 1;
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if cdf[mid] <= q {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let span = cdf[hi] - cdf[lo];
                let frac = if span > 0.0 { (q - cdf[lo]) / span } else { 0.0 };
                (lo as f64 + frac) * h
            }
        }
    }
}

/// Draw the initial potentials: independent inverse-CDF samples from
/// `psi0(·, r_i)` on a fixed grid with linear interpolation. Bit-reproducible
/// for a fixed seed.
pub fn sample_initial_state(spec: &ModelSpec, seed: u64) -> NetworkState {
    let n = spec.site_count();
    let mut rng = stream_rng(seed, &[u64::from_le_bytes(*b"initpots")]);
    let mut potentials = Vec::with_capacity(n);
    if spec.psi0.is_position_dependent() {
        for i in 0..n {
            let sampler = Psi0Sampler::new(&spec.psi0, spec.mesh.site(i));
            potentials.push(sampler.draw(&mut rng));
        }
    } else {
        let sampler = Psi0Sampler::new(&spec.psi0, spec.mesh.site(0));
        for _ in 0..n {
            potentials.push(sampler.draw(&mut rng));
        }
    }
    NetworkState::new(potentials, spec)
}
