//! `irlc`: generate networks and demonstrations, mask them, train, evaluate
//! and benchmark from the command line.

mod bench;
mod manifest;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use irlc::datagen::{apply_missing, gen_grid, random_od_pairs, sample_trajectories, sample_trajectories_unchecked};
use irlc::io::{
    manifest_for, read_network, read_trajectories_file, read_validated, write_network, write_trajectories_file,
};
use irlc::likelihood::dataset_loglik_value;
use irlc::mdp::Theta;
use irlc::optim::{Direction, OptimizerConfig};
use irlc::trainer::{train, Mode, TrainConfig, TrainReport};

use manifest::{sidecar, write_json, RunManifest};

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "irlc", version, about = "Maximum-entropy IRL with missing trajectory segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a grid road network.
    GenNet(GenNetArgs),
    /// Sample demonstrations from a known reward vector.
    GenTraj(GenTrajArgs),
    /// Remove one random window of states from every trajectory.
    Mask(MaskArgs),
    /// Estimate θ by maximum likelihood.
    Train(TrainArgs),
    /// Log-likelihood of complete trajectories at a trained θ.
    Eval(EvalArgs),
    /// Run the masking/training/evaluation grid and write one CSV row per cell.
    Bench(bench::BenchArgs),
    /// Aggregate benchmark runs into means and confidence intervals.
    Report(bench::ReportArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenNetArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GenTrajArgs {
    /// Network directory written by `gen-net`.
    #[arg(long)]
    net: PathBuf,
    /// Comma-separated reward weights, one per feature.
    #[arg(long, allow_hyphen_values = true)]
    theta: String,
    /// Number of trajectories.
    #[arg(long)]
    n: usize,
    /// Number of distinct destinations.
    #[arg(long, default_value_t = 20)]
    n_dest: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample even if θ fails the invertibility check.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MaskArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Missing probability in [0, 1).
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub(crate) struct OptimizerArgs {
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    grad_tol: f64,
    #[arg(long, default_value_t = 0.5)]
    shrink: f64,
    #[arg(long, default_value_t = 60)]
    max_backtracks: usize,
    /// `bfgs` or `steepest`.
    #[arg(long, default_value = "bfgs")]
    direction: String,
}

impl OptimizerArgs {
    pub(crate) fn config(&self) -> Result<OptimizerConfig> {
        let direction = match self.direction.as_str() {
            "bfgs" => Direction::Bfgs,
            "steepest" => Direction::Steepest,
            other => return Err(irlc::Error::Invalid(format!("unknown direction {other:?}")).into()),
        };
        let cfg = OptimizerConfig {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            shrink: self.shrink,
            max_backtracks: self.max_backtracks,
            direction,
            ..OptimizerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// `full`, `composition`, `connected` or `em-bfs`.
    #[arg(long)]
    mode: String,
    /// Path-length limit of `em-bfs`.
    #[arg(long)]
    bfs_depth: Option<usize>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    net: PathBuf,
    /// Starting point, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    theta0: String,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long, default_value_t = irlc::trainer::DEFAULT_EM_OUTER_ITERS)]
    em_outer_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// JSON report of `train` (its `theta` field is used).
    #[arg(long)]
    theta_from: PathBuf,
    /// Complete trajectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    net: PathBuf,
    /// Also write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TrainOutput<'a> {
    #[serde(flatten)]
    report: &'a TrainReport,
    manifest: &'a RunManifest,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    loglik: f64,
    trajectories: usize,
    infeasible_trajectories: usize,
    theta: Vec<f64>,
}

pub(crate) fn parse_theta(text: &str) -> Result<Vec<f64>> {
    Ok(Theta::parse(text)?.0)
}

fn gen_net(args: &GenNetArgs) -> Result<()> {
    let mut run = RunManifest::start("gen-net", args)?.seed("network", args.seed);
    let (_, mdp) = gen_grid(args.rows, args.cols, args.seed)?;
    let mut manifest = manifest_for(&mdp);
    manifest.generator = Some(serde_json::json!({ "kind": "grid", "rows": args.rows, "cols": args.cols, "seed": args.seed }));
    manifest.run_manifest = Some(RUN_MANIFEST.to_string());
    write_network(&args.out, &mdp, &manifest).with_context(|| format!("cannot write network to {}", args.out.display()))?;
    run.finish();
    run.write(&args.out.join(RUN_MANIFEST))
}

fn gen_traj(args: &GenTrajArgs) -> Result<()> {
    let od_seed = args.seed;
    let walk_seed = args.seed.wrapping_add(1);
    let mut run = RunManifest::start("gen-traj", args)?.seed("od_pairs", od_seed).seed("walks", walk_seed);
    let (mdp, _) = read_network(&args.net)?;
    let theta = parse_theta(&args.theta)?;
    mdp.check_theta(&theta)?;
    let data = if args.n == 0 {
        Vec::new()
    } else {
        let od = random_od_pairs(&mdp, args.n, args.n_dest, od_seed)?;
        if args.force {
            sample_trajectories_unchecked(&mdp, &theta, &od, walk_seed)?
        } else {
            sample_trajectories(&mdp, &theta, &od, walk_seed)?
        }
    };
    write_trajectories_file(&args.out, &data)?;
    run.finish();
    run.write(&sidecar(&args.out))
}

fn mask(args: &MaskArgs) -> Result<()> {
    let mut run = RunManifest::start("mask", args)?.seed("mask", args.seed);
    let data = read_trajectories_file(&args.input)?;
    let masked = apply_missing(&data, args.p, args.seed)?;
    write_trajectories_file(&args.out, &masked)?;
    run.finish();
    run.write(&sidecar(&args.out))
}

fn parse_mode(mode: &str, depth: Option<usize>) -> Result<Mode> {
    match (mode, depth) {
        ("em-bfs", Some(depth)) => Ok(format!("em-bfs-{depth}").parse()?),
        ("em-bfs", None) => bail!(irlc::Error::Invalid("em-bfs needs --bfs-depth".into())),
        (other, _) => Ok(other.parse()?),
    }
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut run = RunManifest::start("train", args)?.seed("train", args.seed);
    let mode = parse_mode(&args.mode, args.bfs_depth)?;
    let (mdp, _) = read_network(&args.net)?;
    let data = read_validated(&args.data, &mdp)?;
    let mut cfg = TrainConfig::new(mode, Theta(parse_theta(&args.theta0)?));
    cfg.optimizer = args.optimizer.config()?;
    cfg.em_outer_iters = args.em_outer_iters;
    cfg.seed = args.seed;
    let report = train(&data, &mdp, &cfg)?;
    run.finish();
    write_json(&args.out, &TrainOutput { report: &report, manifest: &run })
}

fn read_theta_from(path: &Path) -> Result<Vec<f64>> {
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))
        .with_context(|| format!("{} is not JSON", path.display()))?;
    let theta = value
        .get("theta")
        .cloned()
        .ok_or_else(|| irlc::Error::Invalid(format!("{} has no theta field", path.display())))?;
    Ok(serde_json::from_value(theta).map_err(irlc::Error::from)?)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let theta = read_theta_from(&args.theta_from)?;
    let (mdp, _) = read_network(&args.net)?;
    let data = read_validated(&args.data, &mdp)?;
    let ll = dataset_loglik_value(&data, &mdp, &theta)?;
    let out = EvalOutput {
        loglik: ll.strict_value(),
        trajectories: data.len(),
        infeasible_trajectories: ll.diagnostics.infeasible.len(),
        theta,
    };
    println!("{}", serde_json::to_string(&out)?);
    if let Some(path) = &args.out {
        let mut run = RunManifest::start("eval", args)?;
        run.finish();
        write_json(path, &serde_json::json!({ "result": out, "manifest": run }))?;
    }
    Ok(())
}

/// 3 for numerical failures of the library, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<irlc::Error>().is_some_and(irlc::Error::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::GenNet(a) => gen_net(a),
        Command::GenTraj(a) => gen_traj(a),
        Command::Mask(a) => mask(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench::bench(a),
        Command::Report(a) => bench::report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
