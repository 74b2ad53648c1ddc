//! LASSO / elastic-net fit at a fixed `(λ, τ)` over the implicit space of
//! all interaction patterns.
//!
//! The fit is a column-generation loop: solve the problem restricted to a
//! small working set by cyclic coordinate descent, polish the result with an
//! exact equicorrelation solve, then search the pattern tree for the most
//! violating inactive pattern. The loop ends when no pattern violates
//! `|x_ℓᵀw| ≤ λ + kkt_tol`, which is a global optimality certificate.
//!
//! Objective (no `1/n` scaling, no intercept):
//! `½‖y − Xβ‖² + ½·l2_weight·‖β‖² + λ‖β‖₁`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::patterns::{materialize, walk, CovariateMatrix, Pattern, PatternColumn, Visit};

/// Coefficient change below which coordinate descent stops.
const CD_TOL: f64 = 1e-10;
const CD_MAX_SWEEPS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// ℓ₁ weight.
    pub lambda: f64,
    /// Elastic-net ℓ₂ weight; zero gives the plain LASSO.
    pub l2_weight: f64,
    /// Cap on interaction order; `None` leaves the tree depth unbounded.
    pub max_order: Option<usize>,
    /// Absolute tolerance on correlations for KKT checks.
    pub kkt_tol: f64,
    /// Column-generation rounds before giving up.
    pub max_iterations: usize,
    /// Use the anti-monotone bounds to skip subtrees.
    pub prune: bool,
}

impl FitConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            l2_weight: 0.0,
            max_order: None,
            kkt_tol: 1e-9,
            max_iterations: 1000,
            prune: true,
        }
    }

    pub fn with_l2(mut self, l2_weight: f64) -> Self {
        self.l2_weight = l2_weight;
        self
    }

    pub fn with_max_order(mut self, d: Option<usize>) -> Self {
        self.max_order = d;
        self
    }

    pub fn with_prune(mut self, prune: bool) -> Self {
        self.prune = prune;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Config(format!(
                "l2_weight must be nonnegative, got {}",
                self.l2_weight
            )));
        }
        if !(self.kkt_tol >= 0.0) {
            return Err(Error::Config(format!("kkt_tol must be nonnegative, got {}", self.kkt_tol)));
        }
        if self.max_order == Some(0) {
            return Err(Error::Config("max_order must be at least 1".into()));
        }
        Ok(())
    }
}

/// One nonzero coefficient of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveTerm {
    pub pattern: Pattern,
    pub coef: f64,
    /// `+1` or `-1`, equal to the sign of `coef`.
    pub sign: i8,
}

/// Objective pieces at a solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Objective {
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// A fitted model. `active` is sorted by pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub active: Vec<ActiveTerm>,
    /// Response the model was fitted to (the augmented response in the
    /// conformal setting).
    pub response: Vec<f64>,
    /// `response − Xβ`.
    pub residual: Vec<f64>,
    /// Last entry of the response, i.e. the candidate label of the test row.
    pub tau: f64,
    pub objective: Objective,
}

impl ModelState {
    /// Coefficient of `pattern`, zero when inactive.
    pub fn coefficient(&self, pattern: &Pattern) -> f64 {
        self.active
            .binary_search_by(|t| t.pattern.cmp(pattern))
            .map_or(0.0, |k| self.active[k].coef)
    }

    /// Model prediction for an arbitrary covariate row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.active
            .iter()
            .map(|t| {
                t.coef
                    * t.pattern
                        .items()
                        .iter()
                        .map(|&j| x[j as usize])
                        .product::<f64>()
            })
            .sum()
    }

    /// `response − Xβ` recomputed from the coefficients.
    pub fn recompute_residual(&self, z: &CovariateMatrix) -> Result<Vec<f64>> {
        let mut w = self.response.clone();
        for t in &self.active {
            let col = materialize(&t.pattern, z)?;
            for (k, &i) in col.support.iter().enumerate() {
                w[i as usize] -= t.coef * col.view().value_at(k);
            }
        }
        Ok(w)
    }

    fn is_active(&self, items: &[u32]) -> bool {
        self.active
            .binary_search_by(|t| t.pattern.items().cmp(items))
            .is_ok()
    }
}

/// `[y₁, …, y_n, τ]`.
pub fn augmented_response(y: &[f64], tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len() + 1);
    out.extend_from_slice(y);
    out.push(tau);
    out
}

/// Largest `|x_ℓᵀw|` over patterns accepted by `include`, if it exceeds
/// `floor`. Ties go to the lexicographically smallest pattern.
pub(crate) fn max_abs_correlation(
    z: &CovariateMatrix,
    w: &[f64],
    max_order: Option<usize>,
    prune: bool,
    floor: f64,
    include: impl Fn(&[u32]) -> bool,
) -> (Option<(Pattern, f64)>, u64) {
    let mut best_val = floor;
    let mut best: Option<Vec<u32>> = None;
    let stats = walk(z, max_order, |node| {
        let (pos, neg) = node.column.split_sums(w);
        let c = (pos - neg).abs();
        if c > best_val && include(node.items) {
            best_val = c;
            best = Some(node.items.to_vec());
        }
        if prune && pos.max(neg) <= best_val {
            Visit::Prune
        } else {
            Visit::Descend
        }
    });
    (
        best.map(|items| (Pattern::from_sorted(&items), best_val)),
        stats.visited,
    )
}

/// Most violating inactive pattern, or `None` when every inactive pattern
/// satisfies `|x_ℓᵀw| ≤ λ + kkt_tol`.
pub fn find_max_violation(
    state: &ModelState,
    z: &CovariateMatrix,
    cfg: &FitConfig,
) -> Option<(Pattern, f64)> {
    let floor = cfg.lambda + cfg.kkt_tol;
    max_abs_correlation(z, &state.residual, cfg.max_order, cfg.prune, floor, |items| {
        !state.is_active(items)
    })
    .0
}

/// Result of a global KKT check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Largest `|x_ℓᵀw|` over inactive patterns.
    pub max_inactive: f64,
    pub argmax_inactive: Option<Pattern>,
    /// Largest `|x_kᵀw − l2·β_k − λ s_k|` over active patterns.
    pub max_active_deviation: f64,
    /// Largest deviation between the stored and recomputed residual.
    pub residual_drift: f64,
    pub passed: bool,
}

/// Checks stationarity of `state` over the full pattern space.
pub fn certify_kkt(state: &ModelState, z: &CovariateMatrix, cfg: &FitConfig) -> Result<KktReport> {
    let w = state.recompute_residual(z)?;
    let residual_drift = w
        .iter()
        .zip(&state.residual)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let (arg, _) = max_abs_correlation(z, &w, cfg.max_order, cfg.prune, -1.0, |items| {
        !state.is_active(items)
    });
    let (argmax_inactive, max_inactive) = match arg {
        Some((p, v)) => (Some(p), v),
        None => (None, 0.0),
    };
    let mut max_active_deviation: f64 = 0.0;
    for t in &state.active {
        let col = materialize(&t.pattern, z)?;
        let dev = col.dot(&w) - cfg.l2_weight * t.coef - cfg.lambda * f64::from(t.sign);
        let sign_ok = t.coef != 0.0 && (t.coef > 0.0) == (t.sign > 0);
        max_active_deviation = max_active_deviation.max(if sign_ok { dev.abs() } else { f64::INFINITY });
    }
    let passed = max_inactive <= cfg.lambda + cfg.kkt_tol && max_active_deviation <= cfg.kkt_tol;
    Ok(KktReport {
        max_inactive,
        argmax_inactive,
        max_active_deviation,
        residual_drift,
        passed,
    })
}

/// Working set of the restricted problem.
struct Working {
    cols: Vec<PatternColumn>,
    norms: Vec<f64>,
    beta: Vec<f64>,
}

impl Working {
    fn push(&mut self, col: PatternColumn) {
        self.norms.push(col.view().sq_norm());
        self.cols.push(col);
        self.beta.push(0.0);
    }

    fn residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        for (col, &b) in self.cols.iter().zip(&self.beta) {
            if b != 0.0 {
                axpy_column(&mut r, col, -b);
            }
        }
        r
    }
}

fn axpy_column(r: &mut [f64], col: &PatternColumn, a: f64) {
    let view = col.view();
    for (k, &i) in col.support.iter().enumerate() {
        r[i as usize] += a * view.value_at(k);
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn objective(residual: &[f64], beta: &[f64], lambda: f64, l2: f64) -> Objective {
    let loss = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
    let l1 = lambda * beta.iter().map(|b| b.abs()).sum::<f64>();
    let l2 = 0.5 * l2 * beta.iter().map(|b| b * b).sum::<f64>();
    Objective {
        loss,
        l1,
        l2,
        total: loss + l1 + l2,
    }
}

/// Cyclic coordinate descent on the working set; returns whether the
/// largest coefficient change fell below tolerance.
fn coordinate_descent(ws: &mut Working, r: &mut [f64], lambda: f64, l2: f64, sweeps: usize) -> bool {
    for _ in 0..sweeps {
        let mut max_change: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for j in 0..ws.cols.len() {
            let old = ws.beta[j];
            let denom = ws.norms[j] + l2;
            if denom == 0.0 {
                continue;
            }
            let rho = ws.cols[j].dot(r) + ws.norms[j] * old;
            let new = soft_threshold(rho, lambda) / denom;
            if new != old {
                axpy_column(r, &ws.cols[j], old - new);
                ws.beta[j] = new;
            }
            max_change = max_change.max((new - old).abs());
            scale = scale.max(new.abs());
        }
        if max_change <= CD_TOL * scale {
            return true;
        }
    }
    false
}

/// Replaces the nonzero coefficients by the exact solution of the
/// equicorrelation system for their current signs, when that solution keeps
/// the signs and the restricted KKT conditions. A linearly dependent support
/// is first reduced by moving along a null direction of its Gram matrix
/// until a coefficient vanishes.
fn polish(ws: &mut Working, y: &[f64], lambda: f64, l2: f64, tol: f64) -> Result<bool> {
    let saved = ws.beta.clone();
    let (idx, chol) = loop {
        let idx: Vec<usize> = (0..ws.beta.len()).filter(|&j| ws.beta[j] != 0.0).collect();
        if idx.is_empty() {
            return Ok(true);
        }
        let k = idx.len();
        let mut gram = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let g = ws.cols[idx[a]].view().dot_column(&ws.cols[idx[b]].view());
                gram[a * k + b] = g;
                gram[b * k + a] = g;
            }
            gram[a * k + a] += l2;
        }
        match linalg::cholesky(&gram, k) {
            Ok(c) => break (idx, c),
            Err(_) if l2 > 0.0 => {
                ws.beta = saved;
                return Ok(false);
            }
            Err(j) => {
                let dir = linalg::null_direction(&gram, k, j);
                let (a, t) = dir
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.abs() > 1e-9)
                    .map(|(a, d)| (a, -ws.beta[idx[a]] / d))
                    .min_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
                    .expect("direction has a unit entry");
                for (b, d) in dir.iter().enumerate() {
                    ws.beta[idx[b]] += t * d;
                }
                ws.beta[idx[a]] = 0.0;
            }
        }
    };
    let saved = ws.beta.clone();
    let rhs: Vec<f64> = idx
        .iter()
        .map(|&j| ws.cols[j].dot(y) - lambda * ws.beta[j].signum())
        .collect();
    let sol = chol.solve(&rhs);
    if sol.iter().zip(&idx).any(|(s, &j)| s.signum() != ws.beta[j].signum() || *s == 0.0) {
        ws.beta = saved;
        return Ok(false);
    }
    for (s, &j) in sol.iter().zip(&idx) {
        ws.beta[j] = *s;
    }
    let r = ws.residual(y);
    let ok = ws
        .cols
        .iter()
        .zip(&ws.beta)
        .all(|(c, &b)| b != 0.0 || c.dot(&r).abs() <= lambda + tol);
    if !ok {
        ws.beta = saved;
    }
    Ok(ok)
}

fn solve_restricted(ws: &mut Working, y: &[f64], cfg: &FitConfig) -> Result<()> {
    let mut r = ws.residual(y);
    let converged = coordinate_descent(ws, &mut r, cfg.lambda, cfg.l2_weight, CD_MAX_SWEEPS);
    // A failed polish leaves the coordinate-descent solution in place.
    if polish(ws, y, cfg.lambda, cfg.l2_weight, cfg.kkt_tol)? || converged {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "restricted coordinate descent did not converge in {CD_MAX_SWEEPS} sweeps"
        )))
    }
}

fn snapshot(ws: &Working, y: &[f64], cfg: &FitConfig) -> ModelState {
    let residual = ws.residual(y);
    let mut active: Vec<ActiveTerm> = ws
        .cols
        .iter()
        .zip(&ws.beta)
        .filter(|(_, &b)| b != 0.0)
        .map(|(c, &b)| ActiveTerm {
            pattern: c.pattern.clone(),
            coef: b,
            sign: if b > 0.0 { 1 } else { -1 },
        })
        .collect();
    active.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    let objective = objective(&residual, &ws.beta, cfg.lambda, cfg.l2_weight);
    ModelState {
        active,
        response: y.to_vec(),
        tau: y.last().copied().unwrap_or(f64::NAN),
        residual,
        objective,
    }
}

/// Fits the model to `y` over all patterns of `z`, certified by a global
/// KKT check. `z` and `y` must have the same number of rows.
pub fn fit(z: &CovariateMatrix, y: &[f64], cfg: &FitConfig) -> Result<ModelState> {
    fit_traced(z, y, cfg).map(|(state, _)| state)
}

/// Like [`fit`], also returning the objective after every round.
pub fn fit_traced(z: &CovariateMatrix, y: &[f64], cfg: &FitConfig) -> Result<(ModelState, Vec<f64>)> {
    cfg.validate()?;
    if y.len() != z.rows() {
        return Err(Error::Dimension {
            context: "fit response",
            expected: z.rows(),
            got: y.len(),
        });
    }
    let mut ws = Working {
        cols: Vec::new(),
        norms: Vec::new(),
        beta: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut state = snapshot(&ws, y, cfg);
    for _ in 0..cfg.max_iterations {
        if !ws.cols.is_empty() {
            solve_restricted(&mut ws, y, cfg)?;
        }
        state = snapshot(&ws, y, cfg);
        trace.push(state.objective.total);
        let floor = cfg.lambda + cfg.kkt_tol;
        let (violator, _) =
            max_abs_correlation(z, &state.residual, cfg.max_order, cfg.prune, floor, |items| {
                !ws.cols.iter().any(|c| c.pattern.items() == items)
            });
        match violator {
            None => return Ok((state, trace)),
            Some((pattern, _)) => ws.push(materialize(&pattern, z)?),
        }
    }
    Err(Error::IterationLimit {
        iterations: cfg.max_iterations,
        state: Box::new(state),
    })
}
