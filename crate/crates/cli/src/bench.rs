//! `bench` and `report`: the experiment grid and its aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use log::{info, warn};
use serde::Serialize;

use irlc::datagen::{gen_grid, random_od_pairs, sample_trajectories};
use irlc::experiment::{run_cell, CellResult, MeanInterval};
use irlc::trainer::Mode;

use crate::manifest::{sidecar, write_json, RunManifest};
use crate::{parse_theta, OptimizerArgs};

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Grid sizes, e.g. `20x20,10x10` (`N` alone means NxN).
    #[arg(long, default_value = "20x20")]
    sizes: String,
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    missing_probs: String,
    /// Masking seeds `0..seeds`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Training modes, comma-separated.
    #[arg(long, default_value = "composition,connected")]
    methods: String,
    /// Reward weights that generate the demonstrations.
    #[arg(long, allow_hyphen_values = true, default_value = "-0.5,-3,-0.8,-0.015")]
    theta_star: String,
    #[arg(long, allow_hyphen_values = true, default_value = "0,0,-2,0")]
    theta0: String,
    #[arg(long, default_value_t = 500)]
    n_traj: usize,
    #[arg(long, default_value_t = 20)]
    n_dest: usize,
    #[arg(long, default_value_t = 0)]
    net_seed: u64,
    /// Seed of the origin-destination draw; walks use `data_seed + 1`.
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Also write one JSON record per cell here, for `report`.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Directory of per-cell JSON records written by `bench --runs-dir`.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || irlc::Error::Invalid(format!("bad grid size {text:?}; expected RxC or N"));
    let parts: Vec<&str> = text.trim().split('x').collect();
    let nums: Vec<usize> = parts.iter().map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    match nums.as_slice() {
        [n] => Ok((*n, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(bad().into()),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| irlc::Error::Invalid(format!("bad {what} {s:?}")).into()))
        .collect()
}

/// Columns of the `bench` CSV, in order.
const BENCH_COLUMNS: [&str; 13] = [
    "size",
    "n_states",
    "method",
    "p",
    "seed",
    "eval_loglik",
    "ll_eval_seconds",
    "factorization_seconds",
    "iterations",
    "evaluations",
    "converged",
    "train_seconds",
    "theta",
];

fn bench_row(c: &CellResult) -> Vec<String> {
    vec![
        c.size.clone(),
        c.n_states.to_string(),
        c.method.clone(),
        c.p.to_string(),
        c.seed.to_string(),
        c.eval_loglik.to_string(),
        c.ll_eval_seconds.to_string(),
        c.factorization_seconds.to_string(),
        c.iterations.to_string(),
        c.evaluations.to_string(),
        c.converged.to_string(),
        c.train_seconds.to_string(),
        c.theta.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
    ]
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let mut run = RunManifest::start("bench", args)?
        .seed("network", args.net_seed)
        .seed("od_pairs", args.data_seed)
        .seed("walks", args.data_seed.wrapping_add(1))
        .seed("mask_seeds", args.seeds);
    let sizes: Vec<(usize, usize)> = args.sizes.split(',').map(parse_size).collect::<Result<_>>()?;
    let probs: Vec<f64> = parse_list(&args.missing_probs, "missing probability")?;
    let modes: Vec<Mode> = parse_list(&args.methods, "method")?;
    let theta_star = parse_theta(&args.theta_star)?;
    let theta0 = parse_theta(&args.theta0)?;
    let optimizer = args.optimizer.config()?;
    if let Some(dir) = &args.runs_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }

    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    w.write_record(BENCH_COLUMNS)?;
    let mut failures = Vec::new();
    for &(rows, cols) in &sizes {
        let label = format!("{rows}x{cols}");
        let (_, mdp) = gen_grid(rows, cols, args.net_seed)?;
        let od = random_od_pairs(&mdp, args.n_traj, args.n_dest, args.data_seed)?;
        let full = sample_trajectories(&mdp, &theta_star, &od, args.data_seed.wrapping_add(1))?;
        for &p in &probs {
            for seed in 0..args.seeds {
                for &mode in &modes {
                    match run_cell(&mdp, &full, &label, mode, p, seed, &theta0, &optimizer) {
                        Ok(cell) => {
                            info!("{label} {mode} p={p} seed={seed}: {}", cell.eval_loglik);
                            w.write_record(bench_row(&cell))?;
                            w.flush()?;
                            if let Some(dir) = &args.runs_dir {
                                let name = format!("{label}_{mode}_p{p}_s{seed}.json");
                                write_json(&dir.join(name), &cell)?;
                            }
                        }
                        Err(e) => {
                            warn!("{label} {mode} p={p} seed={seed} failed: {e}");
                            failures.push((format!("{label} {mode} p={p} seed={seed}"), e));
                        }
                    }
                }
            }
        }
    }
    w.flush()?;
    run.finish();
    run.write(&sidecar(&args.out))?;
    if let Some((cell, err)) = failures.into_iter().next() {
        return Err(anyhow::Error::new(err).context(format!("cell {cell} failed (see log for others)")));
    }
    Ok(())
}

/// Columns of the `report` CSV, in order.
const REPORT_COLUMNS: [&str; 11] = [
    "size",
    "method",
    "p",
    "n",
    "eval_loglik_mean",
    "eval_loglik_std",
    "ci_low",
    "ci_high",
    "ll_eval_seconds_mean",
    "iterations_mean",
    "missing_seeds",
];

fn read_runs(dir: &Path) -> Result<Vec<CellResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut cells = Vec::new();
    for path in paths {
        match fs::read_to_string(&path).map_err(anyhow::Error::from).and_then(|t| Ok(serde_json::from_str::<CellResult>(&t)?)) {
            Ok(c) => cells.push(c),
            Err(e) => eprintln!("skipped {}: {e}", path.display()),
        }
    }
    Ok(cells)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut run = RunManifest::start("report", args)?;
    let cells = read_runs(&args.runs)?;
    let all_seeds: BTreeSet<u64> = cells.iter().map(|c| c.seed).collect();
    // keyed by (size, method, p bits) so p sorts numerically for p >= 0
    let mut groups: BTreeMap<(String, String, u64), Vec<&CellResult>> = BTreeMap::new();
    for c in &cells {
        groups.entry((c.size.clone(), c.method.clone(), c.p.to_bits())).or_default().push(c);
    }
    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    w.write_record(REPORT_COLUMNS)?;
    for ((size, method, p_bits), group) in &groups {
        let p = f64::from_bits(*p_bits);
        let values: Vec<f64> = group.iter().map(|c| c.eval_loglik).collect();
        let ci = MeanInterval::new(&values, args.level)?;
        let have: BTreeSet<u64> = group.iter().map(|c| c.seed).collect();
        let missing: Vec<String> = all_seeds.difference(&have).map(u64::to_string).collect();
        if !missing.is_empty() {
            eprintln!("missing runs for {size} {method} p={p}: seeds {}", missing.join(", "));
        }
        let n = group.len() as f64;
        w.write_record([
            size.clone(),
            method.clone(),
            p.to_string(),
            ci.n.to_string(),
            ci.mean.to_string(),
            ci.std_dev.to_string(),
            ci.low.to_string(),
            ci.high.to_string(),
            (group.iter().map(|c| c.ll_eval_seconds).sum::<f64>() / n).to_string(),
            (group.iter().map(|c| c.iterations as f64).sum::<f64>() / n).to_string(),
            missing.join(";"),
        ])?;
    }
    w.flush()?;
    run.finish();
    run.write(&sidecar(&args.out))
}
