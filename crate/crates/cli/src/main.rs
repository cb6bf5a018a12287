mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icp_attack::Error;

/// Worst-case pose error analysis for point-to-plane ICP.
#[derive(Debug, Parser)]
#[command(name = "icp-attack", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic localization pairs and write a dataset manifest.
    GenData(GenData),
    /// Register one pair and print the solver result as JSON.
    Icp(IcpArgs),
    /// Optimize worst-case perturbations for every pair of a manifest.
    Attack(AttackArgs),
    /// Apply a heuristic perturbation to every pair of a manifest.
    Baseline(BaselineArgs),
    /// Compare the attack with both baselines over one or more manifests.
    Bench(BenchArgs),
    /// Per-location attack error along a route.
    RouteMap(RouteArgs),
    /// Compare analytic gradients with central differences on one pair.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// A shape name, a comma-separated list of names, `mixed` (the
    /// landmark-rich benchmark shapes) or `route`.
    #[arg(long)]
    pub kind: String,
    /// Number of pairs; for `route`, repeats per segment.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value = "shapenet")]
    pub profile: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Boundary samples per unit length of the normalized outline.
    #[arg(long, default_value_t = icp_attack::data::DEFAULT_DENSITY)]
    pub density: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Selects one entry of a manifest.
#[derive(Debug, Args)]
pub struct PairSelect {
    /// A manifest; single-entry manifests need no `--entry`.
    #[arg(long)]
    pub pair: PathBuf,
    /// Entry id, required when the manifest holds several pairs.
    #[arg(long)]
    pub entry: Option<String>,
}

#[derive(Debug, Args)]
pub struct IcpArgs {
    #[command(flatten)]
    pub select: PairSelect,
    /// Solver profile; defaults to the manifest's.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

/// Attack settings shared by every command that runs the optimizer.
#[derive(Debug, Clone, Args)]
pub struct AttackOptions {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Reconstruction weight. The default is tuned for the synthetic data; 10
    /// reproduces the paper's setting.
    #[arg(long, default_value_t = 300.0)]
    pub beta: f64,
    /// Pose-error weights w1..w6 (translation then rotation).
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0])]
    pub w: Vec<f64>,
    /// Use the literal inner-product weighting instead of elementwise weights.
    #[arg(long)]
    pub scalar_weights: bool,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// ICP iterations unrolled for the gradient.
    #[arg(long)]
    pub unroll: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[command(flatten)]
    pub attack: AttackOptions,
    /// Optimizer step size; defaults to 0.05 lambda.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineMethod {
    Uniform,
    Normal,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Neighbourhood size for scan normals (normal method only).
    #[arg(long, default_value_t = icp_attack::attack::BASELINE_NORMAL_K)]
    pub normal_k: usize,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset manifest; repeat to pool several, each reported as its own group.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub attack: AttackOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = icp_attack::harness::DEFAULT_ALLOWANCE_QUANTILE)]
    pub allowance_quantile: f64,
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON report; a CSV table is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    /// Display cap for the per-location error.
    #[arg(long, default_value_t = 6.0)]
    pub cap: f64,
    #[command(flatten)]
    pub attack: AttackOptions,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub select: PairSelect,
    /// Number of scan coordinates to probe.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0])]
    pub w: Vec<f64>,
    #[arg(long)]
    pub unroll: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of probes that must agree.
    #[arg(long, default_value_t = 0.95)]
    pub required: f64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for input problems.
const EXIT_INVALID: u8 = 2;
/// Exit status for solver or optimizer failures.
const EXIT_NUMERICAL: u8 = 3;

/// A failure that is not a library error but still counts as numerical.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericalFailure>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
