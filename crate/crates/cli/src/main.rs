use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swapsched_core::sim::SimError;
use swapsched_core::SimMode;

mod commands;
mod manifest;

/// Plans GPU memory swapping and minibatch size for DNN training.
#[derive(Debug, Parser)]
#[command(name = "swapsched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse inputs and check the generated memory-operation map.
    Validate(ValidateArgs),
    /// Fit throughput curves and bandwidth from profile CSVs.
    Fit(FitArgs),
    /// Choose the largest stall-free minibatch and its pin set.
    Plan(PlanArgs),
    /// Run one training iteration through the event simulator.
    Simulate(SimulateArgs),
    /// Adapt the learning rate to a larger minibatch.
    TuneLr(TuneLrArgs),
    /// Evaluate a grid of minibatch sizes under every mode.
    Sweep(SweepArgs),
    /// validate, fit, plan, simulate and verify in one go.
    Pipeline(PipelineArgs),
    /// Derive plot data from a simulation summary and trace.
    Report(ReportArgs),
    /// Generate a synthetic network, hardware spec and profiles.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Inputs {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    hardware: Option<PathBuf>,
    /// Profile CSVs (compute and transfer); repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    profiles: Vec<PathBuf>,
    /// Fitted model JSON; fitted from --profiles when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Training {
    #[arg(long, default_value_t = 90)]
    epochs: u32,
    #[arg(long, default_value_t = 1_281_167)]
    dataset_size: u64,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Memory-operation map JSON to check instead of building one.
    #[arg(long)]
    gmap: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Reference minibatch; taken from --network when absent.
    #[arg(long)]
    k_base: Option<u32>,
    #[arg(long, default_value_t = swapsched_core::perf::DEFAULT_EFFICIENCY)]
    efficiency: f64,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    training: Training,
    /// Overrides the hardware spec's budget.
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Coarse stride of the downward search.
    #[arg(long, default_value_t = 1)]
    step: u32,
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = swapsched_core::perf::DEFAULT_EFFICIENCY)]
    efficiency: f64,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    training: Training,
    /// Plan JSON; supplies k, pins and the active-area cap.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SimMode>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Allowed stall as a fraction of iteration time when verifying a plan.
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    #[arg(long, default_value_t = swapsched_core::perf::DEFAULT_EFFICIENCY)]
    efficiency: f64,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TuneLrArgs {
    #[arg(long)]
    alpha_base: f64,
    /// Lipschitz constant of the gradient.
    #[arg(long)]
    c: f64,
    #[arg(long)]
    iters_base: u64,
    /// Strong-convexity factor in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Minibatch ratio k*/k_base; overrides --plan, --k-star and --k-base.
    #[arg(long)]
    q: Option<f64>,
    /// Plan JSON supplying k_star and k_base.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    k_star: Option<u32>,
    #[arg(long)]
    k_base: Option<u32>,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    training: Training,
    /// Minibatch sizes to evaluate, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<u32>,
    /// Modes to run; all three by default.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<SimMode>,
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = swapsched_core::perf::DEFAULT_EFFICIENCY)]
    efficiency: f64,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    training: Training,
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long, default_value_t = 1)]
    step: u32,
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    #[arg(long, default_value_t = swapsched_core::perf::DEFAULT_EFFICIENCY)]
    efficiency: f64,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// summary.json written by simulate.
    #[arg(long)]
    summary: PathBuf,
    /// trace.csv written by simulate; adds per-stream busy time.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Conv-BN-activation units of a ResNet-like network.
    #[arg(long, default_value_t = 8)]
    units: u32,
    /// Build a random network with this many layers instead.
    #[arg(long)]
    layers: Option<u32>,
    #[arg(long, default_value_t = 32)]
    k_base: u32,
    /// Minibatch sizes to profile.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64, 128])]
    profile_k: Vec<u32>,
    /// Interconnect bandwidth, bytes/s.
    #[arg(long, default_value_t = 12e9)]
    bandwidth: f64,
    /// Relative timing noise in the profiles.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Device budget; defaults to the footprint at 4x the reference minibatch.
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long, default_value = "swapsched-out")]
    out_dir: PathBuf,
}

/// 0 success, 1 validation or infeasibility, 2 I/O, 3 internal breach.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(SimError::Invariant(_)) = cause.downcast_ref::<SimError>() {
            return 3;
        }
        if cause.is::<commands::InternalError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SWAPSCHED_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Plan(a) => commands::plan(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::TuneLr(a) => commands::tune_lr(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
