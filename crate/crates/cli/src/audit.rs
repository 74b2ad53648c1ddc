//! Oracle comparisons on small random problems: pruned against unpruned
//! paths, stationarity over the enumerated columns, and the exact set
//! against a refit on a fine grid.

use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use shim_conformal::conformal::{default_range, full_cp};
use shim_conformal::datagen::{generate, SyntheticSpec};
use shim_conformal::oracle::{expand, grid_conformal, kkt_violation, DEFAULT_CAP};
use shim_conformal::solver::augmented_response;
use shim_conformal::taupath::{compute_tau_path, TauPath};
use shim_conformal::{FitConfig, Result};

use crate::output::emit;
use crate::{Failure, Format};

const TAU_TOL: f64 = 1e-8;
const COEF_TOL: f64 = 1e-6;

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, short = 'd', default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 25)]
    trials: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Grid points for the refit oracle
    #[arg(long, default_value_t = 2000)]
    grid: usize,
    #[arg(long, default_value_t = 0.5)]
    zeta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrialRow {
    trial: u64,
    seed: u64,
    kinks: usize,
    kinks_unpruned: usize,
    max_tau_gap: f64,
    max_coef_gap: f64,
    events_match: bool,
    max_kkt_violation: f64,
    grid_points: usize,
    grid_mismatches: usize,
    ok: bool,
}

/// Largest relative τ gap and coefficient gap, and whether events and
/// active sets line up kink for kink.
fn compare(a: &TauPath, b: &TauPath) -> (f64, f64, bool) {
    let mut same = a.kinks.len() == b.kinks.len();
    let (mut dtau, mut dcoef) = (0.0f64, 0.0f64);
    for (p, q) in a.kinks.iter().zip(&b.kinks) {
        dtau = dtau.max((p.tau - q.tau).abs() / (1.0 + p.tau.abs()));
        same &= p.event == q.event;
        same &= p.active.len() == q.active.len();
        for (s, t) in p.active.iter().zip(&q.active) {
            same &= s.pattern == t.pattern;
            dcoef = dcoef.max((s.coef - t.coef).abs());
        }
    }
    (dtau, dcoef, same)
}

fn trial(a: &AuditArgs, k: u64) -> Result<TrialRow> {
    let seed = a.seed + k;
    let spec = if a.m >= 5 {
        SyntheticSpec::planted(a.n + 1, a.m, a.zeta, seed)
    } else {
        SyntheticSpec::three_term(a.n + 1, a.m, a.zeta, 2.0, seed)
    };
    let ds = generate(&spec)?;
    let (train, test) = ds.split_at(a.n)?;
    let z = train.z.with_test_row(&test.z.row(0))?;
    let y = &train.y;
    let cfg = FitConfig::new(a.lambda).with_l2(a.l2).with_max_order(Some(a.d));
    let range = default_range(y);
    let pruned = compute_tau_path(&z, y, range, &cfg)?;
    let open = compute_tau_path(&z, y, range, &cfg.clone().with_prune(false))?;
    let (dtau, dcoef, events_match) = compare(&pruned, &open);

    let exp = expand(&z, a.d, DEFAULT_CAP)?;
    let mut kkt = 0.0f64;
    for kink in &pruned.kinks {
        let mut beta = vec![0.0; exp.len()];
        for (p, b) in pruned.coefficients_at(kink.tau) {
            if let Some(j) = exp.index_of(&p) {
                beta[j] = b;
            }
        }
        let v = kkt_violation(&exp, &augmented_response(y, kink.tau), &beta, a.lambda, a.l2);
        kkt = kkt.max(v);
    }

    let set = full_cp(&pruned, a.alpha)?;
    let grid = grid_conformal(&z, y, a.d, a.lambda, a.l2, a.alpha, a.grid, range)?;
    let ends: Vec<f64> = set.intervals.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
    let (mut points, mut mismatches) = (0, 0);
    for (i, &tau) in grid.grid.iter().enumerate() {
        // membership flips at the endpoints; the cell holding one is ambiguous
        if ends.iter().any(|e| (e - tau).abs() <= grid.cell) {
            continue;
        }
        points += 1;
        if set.contains(tau) != grid.accepted(i) {
            mismatches += 1;
        }
    }
    let ok = events_match
        && dtau <= TAU_TOL
        && dcoef <= COEF_TOL
        && kkt <= 1e-7 * (1.0 + a.lambda)
        && mismatches == 0;
    Ok(TrialRow {
        trial: k,
        seed,
        kinks: pruned.kinks.len(),
        kinks_unpruned: open.kinks.len(),
        max_tau_gap: dtau,
        max_coef_gap: dcoef,
        events_match,
        max_kkt_violation: kkt,
        grid_points: points,
        grid_mismatches: mismatches,
        ok,
    })
}

pub fn run(a: &AuditArgs) -> std::result::Result<(), Failure> {
    if a.d == 0 || a.d > a.m {
        return Err(Failure::Config(format!("need 1 ≤ d ≤ m, got d = {} with m = {}", a.d, a.m)));
    }
    let rows = (0..a.trials)
        .into_par_iter()
        .map(|k| trial(a, k))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    emit(&rows, a.format, a.out.as_deref())?;
    let bad = rows.iter().filter(|r| !r.ok).count();
    eprintln!("{} trials, {bad} disagreeing", rows.len());
    if bad > 0 {
        return Err(Failure::Mismatch(bad));
    }
    Ok(())
}
