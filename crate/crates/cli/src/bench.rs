//! Desk-scale versions of the synthetic experiments: interval length,
//! coverage and r² per method, and node counts with and without pruning.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use shim_conformal::conformal::{
    evaluate, full_cp_point, split_from_model, split_model, ExperimentReport, PointRecord,
};
use shim_conformal::datagen::{generate, select_lambda, train_calibration_split, Dataset, SyntheticSpec};
use shim_conformal::patterns::pattern_count;
use shim_conformal::taupath::{compute_tau_path_with, PathOptions};
use shim_conformal::{fit, Error, FitConfig};

use crate::output::{emit, mean_sd};
use crate::{Failure, Format};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// n = 150, m = 10
    LowDim,
    /// n = 150, m = 100
    HighDim,
    /// n = 100, m = 30, pruned against unpruned search
    Pruning,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value_t = Protocol::LowDim)]
    protocol: Protocol,
    /// Labeled rows (protocol default when absent)
    #[arg(long)]
    n: Option<usize>,
    /// Covariates (protocol default when absent)
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    zeta: Option<Vec<f64>>,
    /// Independent datasets (default 15, or 1 for pruning)
    #[arg(long)]
    replicates: Option<u64>,
    #[arg(long, default_value_t = 50)]
    test_points: usize,
    /// Interaction orders compared against the plain LASSO
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    orders: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Depths for the pruning table
    #[arg(long, short = 'd', value_delimiter = ',', default_value = "2,3,4,5")]
    depths: Vec<usize>,
    /// λ for the pruning table
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Seconds allowed per path in the pruning table
    #[arg(long, default_value_t = 60.0)]
    time_budget: f64,
    /// Tree nodes allowed per path in the pruning table
    #[arg(long)]
    node_budget: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MethodRow {
    zeta: f64,
    method: String,
    length: f64,
    length_sd: f64,
    cov: f64,
    cov_sd: f64,
    r2: f64,
    r2_sd: f64,
    hull_length: f64,
    lambda: f64,
}

#[derive(Serialize)]
struct PruningRow {
    zeta: f64,
    d: usize,
    mode: &'static str,
    seed: u64,
    nodes_total: u64,
    nodes_visited: u64,
    mean_nodes_per_step: f64,
    kinks: usize,
    seconds: f64,
    completed: bool,
}

pub fn run(a: &BenchmarkArgs) -> Result<(), Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Config(format!("alpha must be in (0, 1), got {}", a.alpha)));
    }
    match a.protocol {
        Protocol::LowDim => methods(a, 10),
        Protocol::HighDim => methods(a, 100),
        Protocol::Pruning => pruning(a),
    }
}

/// Full and split reports for one method on one replicate.
fn method_pair(
    train: &Dataset,
    test: &Dataset,
    order: usize,
    a: &BenchmarkArgs,
    seed: u64,
) -> Result<(ExperimentReport, ExperimentReport, f64), Failure> {
    let template = FitConfig::new(1.0).with_max_order(Some(order));
    let lambda = select_lambda(train, a.folds, &template, None, seed)?.lambda;
    let cfg = FitConfig { lambda, ..template };
    let base = fit(&train.z, &train.y, &cfg)?;
    let full: Vec<PointRecord> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let x = test.z.row(i);
            let (set, path) = full_cp_point(&train.z, &train.y, &x, &cfg, a.alpha, None, &PathOptions::default())?;
            Ok(PointRecord::from_full(i, &set, &path, test.y[i], Some(base.predict(&x))))
        })
        .collect::<Result<_, Error>>()?;

    let (tr, cal) = train_calibration_split(train.rows(), 0.5, seed);
    let (fit_part, cal_part) = (train.select(&tr)?, train.select(&cal)?);
    let model = split_model(&fit_part.z, &fit_part.y, &cfg)?;
    let split: Vec<PointRecord> = (0..test.rows())
        .map(|i| {
            let res = split_from_model(&model, &cal_part.z, &cal_part.y, &test.z.row(i), a.alpha)?;
            Ok(PointRecord::from_split(i, &res, a.alpha, test.y[i]))
        })
        .collect::<Result<_, Error>>()?;
    Ok((evaluate(&full)?, evaluate(&split)?, lambda))
}

fn methods(a: &BenchmarkArgs, default_m: usize) -> Result<(), Failure> {
    let n = a.n.unwrap_or(150);
    let m = a.m.unwrap_or(default_m);
    let reps = a.replicates.unwrap_or(15);
    let zetas = a.zeta.clone().unwrap_or_else(|| vec![0.4]);
    let mut orders = vec![1];
    orders.extend(a.orders.iter().copied().filter(|&d| d > 1));
    let mut rows = Vec::new();
    for &zeta in &zetas {
        // per order: (full, split, λ) for each replicate
        let mut runs: Vec<Vec<(ExperimentReport, ExperimentReport, f64)>> = vec![Vec::new(); orders.len()];
        for r in 0..reps {
            let seed = a.seed + r;
            let ds = generate(&SyntheticSpec::planted(n + a.test_points, m, zeta, seed))?;
            let (train, test) = ds.split_at(n)?;
            for (k, &order) in orders.iter().enumerate() {
                runs[k].push(method_pair(&train, &test, order, a, seed)?);
            }
            eprintln!("ζ = {zeta}: replicate {}/{reps} done", r + 1);
        }
        for (k, &order) in orders.iter().enumerate() {
            let name = if order == 1 { "lasso_".to_string() } else { format!("shim_{order}") };
            let lambda = runs[k].iter().map(|x| x.2).sum::<f64>() / reps as f64;
            for (suffix, pick) in [("s", 1usize), ("f", 0)] {
                let reports: Vec<&ExperimentReport> =
                    runs[k].iter().map(|x| if pick == 0 { &x.0 } else { &x.1 }).collect();
                let col = |f: &dyn Fn(&ExperimentReport) -> f64| mean_sd(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (length, length_sd) = col(&|r| r.length);
                let (cov, cov_sd) = col(&|r| r.coverage);
                let (r2, r2_sd) = col(&|r| r.r2.unwrap_or(f64::NAN));
                let (hull_length, _) = col(&|r| r.hull_length);
                rows.push(MethodRow {
                    zeta,
                    method: format!("{name}{suffix}"),
                    length,
                    length_sd,
                    cov,
                    cov_sd,
                    r2,
                    r2_sd,
                    hull_length,
                    lambda,
                });
            }
        }
    }
    emit(&rows, a.format, a.out.as_deref())
}

fn pruning(a: &BenchmarkArgs) -> Result<(), Failure> {
    let n = a.n.unwrap_or(100);
    let m = a.m.unwrap_or(30);
    let reps = a.replicates.unwrap_or(1);
    let zetas = a.zeta.clone().unwrap_or_else(|| vec![0.4, 0.7, 0.9]);
    let mut rows = Vec::new();
    for &zeta in &zetas {
        for seed in a.seed..a.seed + reps {
            let ds = generate(&SyntheticSpec::planted(n + 1, m, zeta, seed))?;
            let (train, test) = ds.split_at(n)?;
            let z = train.z.with_test_row(&test.z.row(0))?;
            let lo = train.y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = train.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &d in &a.depths {
                for (mode, prune) in [("pruned", true), ("unpruned", false)] {
                    let cfg = FitConfig::new(a.lambda).with_max_order(Some(d)).with_prune(prune);
                    let opts = PathOptions {
                        max_kinks: None,
                        node_budget: a.node_budget,
                        deadline: Some(Instant::now() + Duration::from_secs_f64(a.time_budget)),
                    };
                    let t0 = Instant::now();
                    let (path, completed) = match compute_tau_path_with(&z, &train.y, (lo, hi), &cfg, &opts) {
                        Ok(p) => (p, true),
                        Err(Error::Budget { partial, .. }) => (*partial, false),
                        Err(e) => return Err(e.into()),
                    };
                    let seconds = t0.elapsed().as_secs_f64();
                    rows.push(PruningRow {
                        zeta,
                        d,
                        mode,
                        seed,
                        nodes_total: u64::try_from(pattern_count(m, d)).unwrap_or(u64::MAX),
                        nodes_visited: path.stats.total_nodes,
                        mean_nodes_per_step: path.stats.mean_nodes_per_step(),
                        kinks: path.kinks.len(),
                        seconds,
                        completed,
                    });
                    eprintln!("ζ = {zeta}, d = {d}, {mode}: {seconds:.2} s{}", if completed { "" } else { " (aborted)" });
                }
            }
        }
    }
    emit(&rows, a.format, a.out.as_deref())
}
