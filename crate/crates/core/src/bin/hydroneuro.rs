//! Command-line driver: configuration in, reproducible artifacts out.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hydroneuro::config::{ExperimentConfig, PartitionCell};
use hydroneuro::runner::{
    run_audit, run_aux, run_converge, run_couple, run_pde, run_simulate, RunContext,
};

#[derive(Parser)]
#[command(
    name = "hydroneuro",
    version,
    about = "Spatially structured spiking-network simulator and its hydrodynamic limit"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Output directory; overrides [output].dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides [run].seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides HYDRONEURO_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Default, Clone, Copy)]
struct ScaleFlags {
    /// Macro time step.
    #[arg(long)]
    delta: Option<f64>,
    /// Square side length.
    #[arg(long)]
    ell: Option<f64>,
    /// Potential bin width.
    #[arg(long)]
    ebin: Option<f64>,
    /// Micro time bin.
    #[arg(long)]
    tau: Option<f64>,
}

impl ScaleFlags {
    fn cell(&self) -> Option<PartitionCell> {
        match (self.delta, self.ell, self.ebin, self.tau) {
            (Some(delta), Some(ell), Some(ebin), Some(tau)) => {
                Some(PartitionCell { delta, ell, ebin, tau })
            }
            _ => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one microscopic trajectory and log every spike.
    Simulate {
        /// Horizon override.
        #[arg(long)]
        horizon: Option<f64>,
        /// Comma-separated snapshot times.
        #[arg(long, value_delimiter = ',')]
        snapshot_times: Option<Vec<f64>>,
    },
    /// Run the discretized auxiliary process against its deterministic
    /// recursion.
    Aux {
        #[command(flatten)]
        scales: ScaleFlags,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Couple the true and auxiliary processes and track good/bad labels.
    Couple {
        #[command(flatten)]
        scales: ScaleFlags,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Solve the limit density over a dyadic step sweep.
    Pde {
        #[arg(long)]
        horizon: Option<f64>,
        /// Number of dyadic refinement levels.
        #[arg(long)]
        delta_levels: Option<usize>,
        /// Initial potential-grid size.
        #[arg(long)]
        ugrid: Option<usize>,
    },
    /// Mesh-refinement study of the empirical measure against the solved
    /// density.
    Converge {
        /// Comma-separated mesh spacings.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Check the path-wise and counting bounds over replicas.
    Audit {
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
}

fn thread_count(cli: Option<usize>) -> usize {
    cli.or_else(|| {
        std::env::var("HYDRONEURO_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = thread_count(cli.global.threads);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let mut config = match ExperimentConfig::load(&cli.global.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };

    let result = match cli.command {
        Command::Simulate { horizon, snapshot_times } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            if let Some(ts) = snapshot_times {
                config.run.snapshot_times = ts;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_simulate(&ctx)
        }
        Command::Aux { scales, horizon } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_aux(&ctx, scales.cell())
        }
        Command::Couple { scales, horizon } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_couple(&ctx, scales.cell())
        }
        Command::Pde { horizon, delta_levels, ugrid } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            if let Some(l) = delta_levels {
                config.pde.delta_levels = l;
            }
            if let Some(u) = ugrid {
                config.pde.ugrid = u;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_pde(&ctx)
        }
        Command::Converge { epsilons, replicas, horizon } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            if let Some(r) = replicas {
                config.run.replicas = r;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_converge(&ctx, epsilons)
        }
        Command::Audit { replicas, horizon } => {
            if let Some(h) = horizon {
                config.run.horizon = h;
            }
            if let Some(r) = replicas {
                config.run.replicas = r;
            }
            let ctx = RunContext::new(config, cli.global.out, cli.global.seed, threads);
            run_audit(&ctx)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
