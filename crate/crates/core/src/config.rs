//! Structured-text experiment configuration: parsing, validation with every
//! violation reported at once, and sweep expansion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    build_mesh, clamp_rate, InitialDensity, Kernel, KernelPreset, ModelError, ModelSpec,
    Psi0Preset, RateShape,
};

/// One validation problem, with the key path and a remedy hint.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
    pub hint: String,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{} violation(s):\n{}", .0.len(), render(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn render(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| format!("  {}: {} ({})", v.path, v.message, v.hint))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn values(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(x) => vec![*x],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum RateConfig {
    Linear { clamp: f64 },
    Power { exponent: f64, clamp: f64 },
    Sigmoid { scale: f64, midpoint: f64, steepness: f64, clamp: f64 },
}

impl RateConfig {
    pub fn shape_and_clamp(&self) -> (RateShape, f64) {
        match *self {
            RateConfig::Linear { clamp } => (RateShape::Linear, clamp),
            RateConfig::Power { exponent, clamp } => (RateShape::Power { exponent }, clamp),
            RateConfig::Sigmoid { scale, midpoint, steepness, clamp } => {
                (RateShape::Sigmoid { scale, midpoint, steepness }, clamp)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ModelSection {
    pub epsilon: f64,
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub periodic: bool,
    pub synaptic: KernelPreset,
    pub gap: KernelPreset,
    pub rate: RateConfig,
    pub psi0: Psi0Preset,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RunSection {
    pub horizon: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Flow substep; derived from the relaxation scales when absent.
    #[serde(default)]
    pub substep: Option<f64>,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

fn default_seed() -> u64 {
    1
}
fn default_replicas() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct PartitionSection {
    pub delta: OneOrMany,
    pub ell: OneOrMany,
    pub ebin: OneOrMany,
    pub tau: OneOrMany,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PartitionCell {
    pub delta: f64,
    pub ell: f64,
    pub ebin: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct PdeSection {
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_delta_finest")]
    pub delta_finest: f64,
    #[serde(default = "default_delta_levels")]
    pub delta_levels: usize,
    #[serde(default = "default_ugrid")]
    pub ugrid: usize,
    #[serde(default = "default_spike_nodes")]
    pub spike_nodes: usize,
}

fn default_ell() -> f64 {
    0.25
}
fn default_delta_finest() -> f64 {
    1.0 / 128.0
}
fn default_delta_levels() -> usize {
    3
}
fn default_ugrid() -> usize {
    257
}
fn default_spike_nodes() -> usize {
    8
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            ell: default_ell(),
            delta_finest: default_delta_finest(),
            delta_levels: default_delta_levels(),
            ugrid: default_ugrid(),
            spike_nodes: default_spike_nodes(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ConvergenceSection {
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct RawConfig {
    model: ModelSection,
    run: RunSection,
    #[serde(default)]
    partition: Option<PartitionSection>,
    #[serde(default)]
    pde: PdeSection,
    #[serde(default)]
    convergence: Option<ConvergenceSection>,
    #[serde(default)]
    output: OutputSection,
}

/// Fully validated configuration with sweep cells expanded.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub run: RunSection,
    pub partition_cells: Vec<PartitionCell>,
    pub pde: PdeSection,
    pub convergence: Option<ConvergenceSection>,
    pub output_dir: PathBuf,
    /// The resolved configuration, defaults included, echoed into manifests.
    pub echo: String,
}

fn check_integer(x: f64, path: &str, what: &str, hint: &str, out: &mut Vec<Violation>) {
    let r = x.round();
    if !(x > 0.0) || r < 1.0 || (x - r).abs() > 1e-9 * r.max(1.0) {
        out.push(Violation {
            path: path.to_string(),
            message: format!("{what} = {x} is not a positive integer"),
            hint: hint.to_string(),
        });
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut violations = Vec::new();
        let m = &raw.model;
        check_integer(
            1.0 / m.epsilon,
            "model.epsilon",
            "1/epsilon",
            "pick epsilon = 1/k for an integer k",
            &mut violations,
        );
        if !(m.alpha >= 0.0) {
            violations.push(Violation {
                path: "model.alpha".into(),
                message: format!("leak rate {} is negative", m.alpha),
                hint: "alpha must be nonnegative".into(),
            });
        }
        let (_, clamp) = m.rate.shape_and_clamp();
        if !(clamp > 0.0) {
            violations.push(Violation {
                path: "model.rate.clamp".into(),
                message: format!("clamp level {clamp} must be positive"),
                hint: "rates are frozen above the clamp; pick a positive level".into(),
            });
        }
        let r0 = InitialDensity::new(m.psi0).support_bound;
        if !(raw.run.horizon > 0.0) {
            violations.push(Violation {
                path: "run.horizon".into(),
                message: format!("horizon {} must be positive", raw.run.horizon),
                hint: "set run.horizon > 0".into(),
            });
        }

        // sweep expansion, outermost delta to innermost tau
        let mut cells = Vec::new();
        if let Some(p) = &raw.partition {
            for &delta in &p.delta.values() {
                for &ell in &p.ell.values() {
                    for &ebin in &p.ebin.values() {
                        for &tau in &p.tau.values() {
                            check_integer(
                                1.0 / ell,
                                "partition.ell",
                                "1/ell",
                                "squares must tile [0,1)^2",
                                &mut violations,
                            );
                            check_integer(
                                ell / m.epsilon,
                                "partition.ell",
                                "ell/epsilon",
                                "squares must contain whole mesh cells (also check model.epsilon)",
                                &mut violations,
                            );
                            check_integer(
                                delta / tau,
                                "partition.tau",
                                "delta/tau",
                                "time bins must tile [0,delta) (also check partition.delta)",
                                &mut violations,
                            );
                            check_integer(
                                r0 / ebin,
                                "partition.ebin",
                                "r0/ebin",
                                "potential bins must tile [0,r0] (r0 comes from model.psi0)",
                                &mut violations,
                            );
                            cells.push(PartitionCell { delta, ell, ebin, tau });
                        }
                    }
                }
            }
        }

        check_integer(
            1.0 / raw.pde.ell,
            "pde.ell",
            "1/ell",
            "the density grid must tile [0,1)^2",
            &mut violations,
        );
        if raw.pde.delta_levels < 2 {
            violations.push(Violation {
                path: "pde.delta_levels".into(),
                message: format!("{} refinement level(s)", raw.pde.delta_levels),
                hint: "at least 2 dyadic levels are needed for the error estimate".into(),
            });
        }
        if let Some(c) = &raw.convergence {
            for &eps in &c.epsilons {
                check_integer(
                    1.0 / eps,
                    "convergence.epsilons",
                    "1/epsilon",
                    "every sweep epsilon must divide 1",
                    &mut violations,
                );
            }
        }

        if !violations.is_empty() {
            return Err(ConfigError::Invalid(violations));
        }
        let echo = toml::to_string_pretty(&raw).unwrap_or_default();
        Ok(ExperimentConfig {
            model: raw.model,
            run: raw.run,
            partition_cells: cells,
            pde: raw.pde,
            convergence: raw.convergence,
            output_dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out")),
            echo,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_str(&text)
    }

    /// Assemble the model, optionally at a different mesh scale (convergence
    /// sweeps reuse every other section).
    pub fn build_model(&self, epsilon: Option<f64>) -> Result<ModelSpec, ModelError> {
        let m = &self.model;
        let mesh = build_mesh(epsilon.unwrap_or(m.epsilon))?;
        let (shape, clamp) = m.rate.shape_and_clamp();
        ModelSpec::build(
            mesh,
            m.alpha,
            Kernel::new(m.synaptic, m.periodic),
            Kernel::new(m.gap, m.periodic),
            clamp_rate(shape, clamp)?,
            InitialDensity::new(m.psi0),
        )
    }

    /// The flow substep: configured or derived.
    pub fn substep(&self, spec: &ModelSpec) -> f64 {
        self.run.substep.unwrap_or_else(|| spec.default_substep())
    }
}
