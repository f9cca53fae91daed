//! `poseopt` command-line driver.
//!
//! Every command prints a JSON [`report::RunReport`] to stdout (or to
//! `--out`/`--report`), a one-line summary to stderr, and exits 0. Failures
//! print a JSON error object as the last stderr line and exit 1 (usage),
//! 2 (bad data) or 3 (pruning target unreachable).

mod cmd;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::json;

use poseopt::graph::{ActivationFn, TensorShape};
use poseopt::prune::Scheme;
use poseopt::rewrite::DepthMultiplier;

use report::{Ctx, EXIT_DATA, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "poseopt", version, about = "Analyze, rewrite, prune and decode pose-estimation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, MAC/FLOP, receptive-field and latency report for a graph.
    Analyze(AnalyzeArgs),
    /// Apply rewrite passes to a graph, or depth-rescale a stage spec.
    Optimize(OptimizeArgs),
    /// Choose per-layer pruning ratios for a target speedup or distortion budget.
    PrunePlan(PrunePlanArgs),
    /// Group heatmap and PAF tensors into person poses.
    Decode(DecodeArgs),
    /// Render a synthetic scene with known poses.
    Synth(SynthArgs),
    /// Rewrite, plan and decode in one run, checked against a synthetic scene.
    E2e(E2eArgs),
    /// Fit latency parameters to measured timings.
    Calibrate(CalibrateArgs),
    /// Write seeded random weights for a graph.
    InitWeights(InitWeightsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze(_) => "analyze",
            Command::Optimize(_) => "optimize",
            Command::PrunePlan(_) => "prune-plan",
            Command::Decode(_) => "decode",
            Command::Synth(_) => "synth",
            Command::E2e(_) => "e2e",
            Command::Calibrate(_) => "calibrate",
            Command::InitWeights(_) => "init-weights",
        }
    }
}

fn parse_shape(s: &str) -> Result<TensorShape, String> {
    s.parse().map_err(|e: poseopt::graph::GraphError| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("'{s}' is not HxW"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in '{s}'"))?;
    if h == 0 || w == 0 {
        return Err(format!("'{s}' has a zero extent"));
    }
    Ok((h, w))
}

fn parse_act_pair(s: &str) -> Result<(ActivationFn, ActivationFn), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("'{s}' is not FROM:TO"))?;
    let a: ActivationFn = a.parse().map_err(|e: poseopt::graph::GraphError| e.to_string())?;
    let b: ActivationFn = b.parse().map_err(|e: poseopt::graph::GraphError| e.to_string())?;
    Ok((a, b))
}

fn parse_multiplier(s: &str) -> Result<DepthMultiplier, String> {
    s.parse().map_err(|e: poseopt::rewrite::RewriteError| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: poseopt::prune::PruneError| e.to_string())
}

#[derive(Args)]
struct ReportOut {
    /// Write the report here instead of stdout.
    #[arg(short, long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    graph: PathBuf,
    /// Override the graph input shape, e.g. 3x368x368.
    #[arg(long, value_parser = parse_shape)]
    input: Option<TensorShape>,
    /// Latency parameters (defaults to the built-in illustrative set).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
pub struct OptimizeArgs {
    /// A graph, or a stage spec when --depth-rescale is given.
    input: PathBuf,
    /// Replace square odd kernels larger than --max-kernel by 3x3 chains.
    #[arg(long)]
    replace_large_kernels: bool,
    #[arg(long, default_value_t = 3)]
    max_kernel: usize,
    /// Replace dilated 3x3 convs by undilated chains with the same receptive field.
    #[arg(long)]
    dedilate: bool,
    /// Swap activation functions, e.g. swish:hardtanh. Repeatable.
    #[arg(long, value_name = "FROM:TO", value_parser = parse_act_pair)]
    replace_act: Vec<(ActivationFn, ActivationFn)>,
    /// Rescale stage depths by this rational factor (2, 3/2, 0.5).
    #[arg(long, value_name = "M", value_parser = parse_multiplier)]
    depth_rescale: Option<DepthMultiplier>,
    #[arg(long, default_value_t = 8)]
    rounding_multiple: usize,
    #[arg(long, default_value_t = 0.15)]
    flops_tolerance: f64,
    /// Where the rewritten graph (or spec) goes.
    #[arg(short, long)]
    out: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["target_speedup", "max_distortion"])))]
pub struct PrunePlanArgs {
    graph: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Required dense/planned latency ratio.
    #[arg(long)]
    target_speedup: Option<f64>,
    /// Mean relative output distortion budget; needs --weights.
    #[arg(long)]
    max_distortion: Option<f64>,
    #[arg(long, default_value_t = 4)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    /// unstructured, channel or block:RxC.
    #[arg(long, default_value = "unstructured", value_parser = parse_scheme)]
    scheme: Scheme,
    /// Weight directory (see init-weights).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also write the pruned weights here; needs --weights.
    #[arg(long, requires = "weights")]
    pruned_weights_out: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape)]
    input: Option<TensorShape>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    heat: PathBuf,
    #[arg(long)]
    paf: PathBuf,
    #[arg(long)]
    skeleton: PathBuf,
    /// Decoder settings; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file.
    #[arg(long)]
    peak_threshold: Option<f64>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    persons: usize,
    #[arg(long)]
    seed: u64,
    /// Image size HxW (default 368x368).
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Uniform noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Render settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skeleton (defaults to COCO-18).
    #[arg(long)]
    skeleton: Option<PathBuf>,
    /// Output directory for scene.json, heat.tnsr and paf.tnsr.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct E2eArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Speedup of the rewritten and pruned graph over the input graph.
    #[arg(long)]
    target_speedup: f64,
    #[arg(long, default_value = "unstructured", value_parser = parse_scheme)]
    scheme: Scheme,
    #[arg(long)]
    persons: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Skip the rewrite stage.
    #[arg(long)]
    no_rewrite: bool,
    /// Also write the rewritten graph, plan and scene tensors here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Measurements JSON: {"dense": [{macs, seconds}], "sparse": [{macs, ratio, seconds}]}.
    measurements: PathBuf,
    /// Parameters to start from; penalties are carried over.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct InitWeightsArgs {
    graph: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("POSEOPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("POSEOPT_THREADS='{v}' is not a non-negative integer"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "exit_code": code } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version.
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            return fail(EXIT_USAGE, "usage", text.lines().next().unwrap_or("usage error").to_string());
        }
    };
    if let Err(m) = init_threads() {
        return fail(EXIT_DATA, "config", m);
    }

    let name = cli.command.name();
    let mut ctx = Ctx::new();
    let (outcome, report_path) = match &cli.command {
        Command::Analyze(a) => (cmd::analyze(a, &mut ctx), a.report.out.clone()),
        Command::Optimize(a) => (cmd::optimize(a, &mut ctx), a.report.clone()),
        Command::PrunePlan(a) => (cmd::prune_plan(a, &mut ctx), a.report.out.clone()),
        Command::Decode(a) => (cmd::decode(a, &mut ctx), a.report.out.clone()),
        Command::Synth(a) => (cmd::synth(a, &mut ctx), a.report.clone()),
        Command::E2e(a) => (cmd::e2e(a, &mut ctx), a.report.out.clone()),
        Command::Calibrate(a) => (cmd::calibrate(a, &mut ctx), a.report.clone()),
        Command::InitWeights(a) => (cmd::init_weights(a, &mut ctx), a.report.clone()),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return ExitCode::from(e.exit_code());
        }
    };
    let summary = outcome.summary.clone();
    let report = ctx.finish(name, outcome);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    match report_path {
        Some(p) => {
            if let Err(e) = std::fs::write(&p, text) {
                return fail(EXIT_DATA, "io", format!("{}: {e}", p.display()));
            }
        }
        None => print!("{text}"),
    }
    eprintln!("{name}: {summary}");
    ExitCode::SUCCESS
}
