//! Property checks shared by the property suite and the acceptance target.
//! Each returns a description of the first violation.

use shim_conformal::conformal::{default_range, full_cp, ConformalSet};
use shim_conformal::oracle::{expand, kkt_violation, DEFAULT_CAP};
use shim_conformal::patterns::{bound_pair, materialize, CovariateMatrix};
use shim_conformal::solver::{augmented_response, certify_kkt, fit, ModelState, Objective};
use shim_conformal::taupath::{compute_tau_path, TauPath};
use shim_conformal::FitConfig;

use super::{max_abs_diff, path_beta, Instance};

pub type Check = Result<(), String>;

/// Model state of the path at one of its kinks.
pub fn state_at_kink(path: &TauPath, y: &[f64], k: usize) -> ModelState {
    let kink = &path.kinks[k];
    ModelState {
        // a pattern that joins at this kink sits at zero
        active: kink.active.iter().filter(|t| t.coef != 0.0).cloned().collect(),
        response: augmented_response(y, kink.tau),
        residual: kink.residual.clone(),
        tau: kink.tau,
        objective: Objective::default(),
    }
}

/// Stationarity at every kink, both through the tree search and through
/// explicit enumeration.
pub fn kkt_at_kinks(inst: &Instance, cfg: &FitConfig, d: usize) -> Check {
    let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), cfg).map_err(|e| e.to_string())?;
    let exp = expand(&inst.z, d, DEFAULT_CAP).map_err(|e| e.to_string())?;
    let mut loose = cfg.clone();
    loose.kkt_tol = 1e-7 * (1.0 + cfg.lambda);
    for (k, kink) in path.kinks.iter().enumerate() {
        let state = state_at_kink(&path, &inst.y, k);
        let report = certify_kkt(&state, &inst.z, &loose).map_err(|e| e.to_string())?;
        if !report.passed || report.residual_drift > 1e-8 {
            return Err(format!("kink {k} at τ={}: {report:?}", kink.tau));
        }
        let beta = path_beta(&path, &exp, kink.tau);
        let y_aug = augmented_response(&inst.y, kink.tau);
        let v = kkt_violation(&exp, &y_aug, &beta, cfg.lambda, cfg.l2_weight);
        if v > loose.kkt_tol {
            return Err(format!("kink {k} at τ={}: enumerated violation {v:e}", kink.tau));
        }
    }
    Ok(())
}

/// A fresh fit at points strictly inside segments matches the affine
/// interpolation, and active signs do not change inside a segment.
pub fn piecewise_linear(inst: &Instance, cfg: &FitConfig, d: usize, fractions: &[f64]) -> Check {
    let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), cfg).map_err(|e| e.to_string())?;
    let exp = expand(&inst.z, d, DEFAULT_CAP).map_err(|e| e.to_string())?;
    for (k, pair) in path.kinks.windows(2).enumerate() {
        let (a, b) = (pair[0].tau, pair[1].tau);
        for &f in fractions {
            let tau = a + f * (b - a);
            if tau <= a || tau >= b {
                continue;
            }
            let coefs = pair[0].coefficients_at(tau);
            for (t, c) in pair[0].active.iter().zip(&coefs) {
                if c * f64::from(t.sign) < -1e-9 {
                    return Err(format!("segment {k}: {} changes sign at τ={tau}", t.pattern));
                }
            }
            let state = fit(&inst.z, &augmented_response(&inst.y, tau), cfg).map_err(|e| e.to_string())?;
            let mut refit = vec![0.0; exp.len()];
            for t in &state.active {
                refit[exp.index_of(&t.pattern).ok_or("refit pattern outside expansion")?] = t.coef;
            }
            let ours = path_beta(&path, &exp, tau);
            let gap = max_abs_diff(&exp.predict(&refit), &exp.predict(&ours));
            if gap > 1e-6 {
                return Err(format!("segment {k} τ={tau}: fitted values differ by {gap:e}"));
            }
            if cfg.l2_weight > 0.0 {
                let gap = max_abs_diff(&refit, &ours);
                if gap > 1e-6 {
                    return Err(format!("segment {k} τ={tau}: coefficients differ by {gap:e}"));
                }
            }
        }
    }
    Ok(())
}

/// Every pattern's bounds dominate the correlations and the bounds of all
/// of its descendants, checked against the full enumeration.
pub fn bound_dominance(z: &CovariateMatrix, w: &[f64], v: &[f64]) -> Check {
    let exp = expand(z, z.m(), DEFAULT_CAP).map_err(|e| e.to_string())?;
    let bounds = exp
        .patterns
        .iter()
        .map(|p| {
            let col = materialize(p, z).map_err(|e| e.to_string())?;
            bound_pair(&col, w, v).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (a, pa) in exp.patterns.iter().enumerate() {
        let (bw, bv) = bounds[a];
        for (b, pb) in exp.patterns.iter().enumerate() {
            if !pb.extends(pa) {
                continue;
            }
            let (cw, cv) = (exp.dot(b, w).abs(), exp.dot(b, v).abs());
            let slack = 1e-12 * (1.0 + bw + bv);
            if cw > bw + slack || cv > bv + slack {
                return Err(format!("{pb} correlations ({cw}, {cv}) exceed bounds of {pa} ({bw}, {bv})"));
            }
            if bounds[b].0 > bw + slack || bounds[b].1 > bv + slack {
                return Err(format!("bounds of {pb} {:?} exceed those of {pa} ({bw}, {bv})", bounds[b]));
            }
        }
    }
    Ok(())
}

/// Symmetric difference of two sets, as total length.
pub fn set_gap(a: &ConformalSet, b: &ConformalSet) -> f64 {
    let mut cuts: Vec<f64> = a
        .intervals
        .iter()
        .chain(&b.intervals)
        .flat_map(|&(l, h)| [l, h])
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .filter(|c| c[1] > c[0])
        .filter(|c| {
            let mid = 0.5 * (c[0] + c[1]);
            a.contains(mid) != b.contains(mid)
        })
        .map(|c| c[1] - c[0])
        .sum()
}

/// Reordering the labeled rows leaves the conformal set unchanged.
pub fn permutation_invariant(inst: &Instance, cfg: &FitConfig, alpha: f64, perm: &[usize]) -> Check {
    let n = inst.y.len();
    let range = default_range(&inst.y);
    let base = full_cp(
        &compute_tau_path(&inst.z, &inst.y, range, cfg).map_err(|e| e.to_string())?,
        alpha,
    )
    .map_err(|e| e.to_string())?;
    let mut rows: Vec<usize> = perm.to_vec();
    rows.push(n);
    let z = inst.z.select_rows(&rows).map_err(|e| e.to_string())?;
    let y: Vec<f64> = perm.iter().map(|&i| inst.y[i]).collect();
    let moved = full_cp(&compute_tau_path(&z, &y, range, cfg).map_err(|e| e.to_string())?, alpha)
        .map_err(|e| e.to_string())?;
    let gap = set_gap(&base, &moved);
    if gap > 1e-7 * (range.1 - range.0) {
        return Err(format!("sets differ by {gap:e}: {:?} vs {:?}", base.intervals, moved.intervals));
    }
    Ok(())
}

/// Larger α gives a subset.
pub fn alpha_monotone(inst: &Instance, cfg: &FitConfig, alphas: &[f64]) -> Check {
    let path = compute_tau_path(&inst.z, &inst.y, default_range(&inst.y), cfg).map_err(|e| e.to_string())?;
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sets = sorted
        .iter()
        .map(|&a| full_cp(&path, a).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    for (k, pair) in sets.windows(2).enumerate() {
        let (wide, narrow) = (&pair[0], &pair[1]);
        for &(l, h) in &narrow.intervals {
            let inside = wide.intervals.iter().any(|&(a, b)| a <= l + 1e-12 && h <= b + 1e-12);
            if !inside {
                return Err(format!(
                    "α={} interval [{l}, {h}] not inside α={} set {:?}",
                    sorted[k + 1],
                    sorted[k],
                    wide.intervals
                ));
            }
        }
    }
    Ok(())
}
