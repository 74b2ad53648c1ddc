//! Exact solution path `τ ↦ β(τ)` of the SHIM LASSO (or elastic net) as the
//! test row's label `τ` sweeps `[y_min, y_max]` at fixed `λ`.
//!
//! Between kinks the active set `A` and the signs are constant and the path
//! is affine with slope `ν = (X_AᵀX_A + l2·I)⁻¹ x_{test,A}`. The residual
//! moves as `w(τ_t + Δ) = w(τ_t) + Δ·(e_test − v)` with `v = X_A ν`, so an
//! inactive correlation moves as `ρ_ℓ + Δ·γ_ℓ` with `γ_ℓ = x_{test,ℓ} − x_ℓᵀv`.
//! The next kink is the nearer of
//!
//! * a leave event, `Δ¹ = min_{k∈A} (−β_k/ν_k)₊₊`, and
//! * a join event, `Δ² = min_{ℓ∉A} ((λ·sign γ_ℓ − ρ_ℓ)/γ_ℓ)₊₊`,
//!
//! where `(a)₊₊` is `a` when positive and `∞` otherwise. The join minimum is
//! taken over every pattern in the tree; subtrees are skipped when
//!
//! `b_{ℓ,w} + Δ*(b_{ℓ,v} + x_{test,ℓ}) < |ρ̄_k| − Δ*(|η̄_k| + x_{test,k})`
//!
//! for the current best step `Δ*` and some active reference `k`, with
//! `ρ̄_k = x_kᵀw − l2·β_k` and `η̄_k = x_kᵀv + l2·ν_k` (these reduce to the
//! plain correlations when `l2 = 0`). With an empty active set the right-hand
//! side is `λ`. Since `b_{ℓ',·} ≤ b_{ℓ,·}` and `x_{test,ℓ'} ≤ x_{test,ℓ}` for
//! every descendant `ℓ'`, no skipped pattern can reach `|x_ℓ'ᵀw| = λ` within
//! `Δ*`.
//!
//! The test row is the last row of the covariate matrix.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{BudgetKind, Error, Result};
use crate::linalg;
use crate::patterns::{materialize, walk, CovariateMatrix, Pattern, PatternColumn, Visit};
use crate::solver::{augmented_response, fit, ActiveTerm, FitConfig};

/// Joins and leaves closer than this are treated as simultaneous.
pub const TIE_TOL: f64 = 1e-12;
/// Steps shorter than this are merged into the previous kink.
pub const COALESCE_TOL: f64 = 1e-12;
/// `|γ|` at or below `GAMMA_RTOL·(1 + b_v)` counts as a flat correlation.
const GAMMA_RTOL: f64 = 1e-10;
/// Inactive correlations within this (relative) distance of `±λ` count as
/// on the boundary.
const BOUNDARY_RTOL: f64 = 1e-9;
/// Active coefficients this close to zero count as zero.
const ZERO_TOL: f64 = 1e-12;
/// Slack subtracted from the pruning right-hand side.
const PRUNE_MARGIN_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Start,
    Join { pattern: Pattern, sign: i8 },
    Leave { pattern: Pattern },
    End,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Start => "start",
            Event::Join { .. } => "join",
            Event::Leave { .. } => "leave",
            Event::End => "end",
        }
    }
}

/// Path state at one breakpoint. Everything except `event` describes the
/// segment that starts here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kink {
    pub tau: f64,
    /// Sorted by pattern.
    pub active: Vec<ActiveTerm>,
    /// What happened at `tau`.
    pub event: Event,
    /// `dβ_A/dτ`, aligned with `active`.
    pub nu: Vec<f64>,
    /// `w(τ)` over all rows, test row last.
    pub residual: Vec<f64>,
    /// `v = X_A ν`.
    pub residual_direction: Vec<f64>,
    /// `γ` of the pattern that joins at the end of this segment, if any.
    pub joiner_gamma: Option<f64>,
    /// Tree nodes evaluated by the join search of this segment.
    pub nodes_visited: u64,
    /// Set when this kink absorbed near-simultaneous events.
    pub degenerate: bool,
}

impl Kink {
    /// Coefficients of the active patterns at `tau` on this segment.
    pub fn coefficients_at(&self, tau: f64) -> Vec<f64> {
        let d = tau - self.tau;
        self.active
            .iter()
            .zip(&self.nu)
            .map(|(t, nu)| t.coef + d * nu)
            .collect()
    }

    /// Residual at `tau` on this segment.
    pub fn residual_at(&self, tau: f64) -> Vec<f64> {
        let d = tau - self.tau;
        let last = self.residual.len() - 1;
        self.residual
            .iter()
            .zip(&self.residual_direction)
            .enumerate()
            .map(|(i, (w, v))| w + d * (if i == last { 1.0 } else { 0.0 } - v))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub kink_count: usize,
    /// Join-search node count of every segment.
    pub nodes_per_step: Vec<u64>,
    pub total_nodes: u64,
    /// Number of near-simultaneous events merged into a single kink.
    pub coalesced: usize,
    /// Kinks where a join and a leave tied within [`TIE_TOL`].
    pub ties: usize,
}

impl PathStats {
    pub fn mean_nodes_per_step(&self) -> f64 {
        if self.nodes_per_step.is_empty() {
            0.0
        } else {
            self.total_nodes as f64 / self.nodes_per_step.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPath {
    /// Strictly increasing in `tau`; first at `range.0`, last at `range.1`.
    pub kinks: Vec<Kink>,
    pub lambda: f64,
    pub l2_weight: f64,
    pub range: (f64, f64),
    pub stats: PathStats,
}

impl TauPath {
    /// Index of the segment containing `tau` (clamped to the path range).
    pub fn segment_index(&self, tau: f64) -> usize {
        let k = self.kinks.partition_point(|k| k.tau <= tau);
        k.saturating_sub(1).min(self.kinks.len().saturating_sub(2))
    }

    /// `(pattern, β)` for every active pattern at `tau`.
    pub fn coefficients_at(&self, tau: f64) -> Vec<(Pattern, f64)> {
        let kink = &self.kinks[self.segment_index(tau)];
        kink.active
            .iter()
            .map(|t| t.pattern.clone())
            .zip(kink.coefficients_at(tau))
            .collect()
    }

    /// Line-delimited dump: one JSON object per kink.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for k in &self.kinks {
            let _ = write!(out, "{{\"tau\":{:.16e},\"event\":\"{}\"", k.tau, k.event.name());
            match &k.event {
                Event::Join { pattern, sign } => {
                    let _ = write!(out, ",\"pattern\":{},\"sign\":{sign}", json_items(pattern));
                }
                Event::Leave { pattern } => {
                    let _ = write!(out, ",\"pattern\":{}", json_items(pattern));
                }
                _ => {}
            }
            out.push_str(",\"active\":[");
            for (a, t) in k.active.iter().enumerate() {
                if a > 0 {
                    out.push(',');
                }
                out.push_str(&json_items(&t.pattern));
            }
            out.push_str("],\"coefficients\":[");
            for (a, t) in k.active.iter().enumerate() {
                if a > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.16e}", t.coef);
            }
            out.push_str("]}\n");
        }
        out
    }
}

fn json_items(p: &Pattern) -> String {
    let items: Vec<String> = p.items().iter().map(|i| i.to_string()).collect();
    format!("[{}]", items.join(","))
}

/// Limits on a path computation.
#[derive(Debug, Clone, Default)]
pub struct PathOptions {
    /// Maximum number of kinks (default 100 000).
    pub max_kinks: Option<usize>,
    /// Maximum total tree nodes over all join searches.
    pub node_budget: Option<u64>,
    pub deadline: Option<Instant>,
}

/// Solves `(X_AᵀX_A + l2·I) ν = x_{test,A}` and returns `(ν, X_A ν)`.
pub fn directions(
    active: &[Pattern],
    z: &CovariateMatrix,
    l2_weight: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cols = active
        .iter()
        .map(|p| materialize(p, z))
        .collect::<Result<Vec<_>>>()?;
    let sys = ActiveSystem::factor(&cols, l2_weight, z.rows())?;
    Ok((sys.nu.clone(), sys.v.clone()))
}

/// Direction vectors of one segment.
struct ActiveSystem {
    nu: Vec<f64>,
    v: Vec<f64>,
}

impl ActiveSystem {
    fn factor(cols: &[PatternColumn], l2: f64, rows: usize) -> Result<Self> {
        let k = cols.len();
        let test = rows - 1;
        if k == 0 {
            return Ok(Self {
                nu: vec![],
                v: vec![0.0; rows],
            });
        }
        let mut gram = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let g = cols[a].view().dot_column(&cols[b].view());
                gram[a * k + b] = g;
                gram[b * k + a] = g;
            }
            gram[a * k + a] += l2;
        }
        let chol = linalg::cholesky(&gram, k).map_err(|j| Error::Singular {
            patterns: linalg::dependent_set(&gram, k, j)
                .into_iter()
                .map(|a| cols[a].pattern.clone())
                .collect(),
        })?;
        let rhs: Vec<f64> = cols.iter().map(|c| c.view().entry(test)).collect();
        let nu = chol.solve(&rhs);
        let mut v = vec![0.0; rows];
        for (c, &n) in cols.iter().zip(&nu) {
            let view = c.view();
            for (q, &i) in c.support.iter().enumerate() {
                v[i as usize] += n * view.value_at(q);
            }
        }
        Ok(Self {
            nu,
            v,
        })
    }
}

/// Smallest positive `−β_k/ν_k` over the active set and the pattern that
/// reaches zero there; `(∞, None)` when no coefficient moves towards zero.
pub fn step_leave(kink: &Kink) -> (f64, Option<Pattern>) {
    let mut best = f64::INFINITY;
    let mut leaver = None;
    for (t, &nu) in kink.active.iter().zip(&kink.nu) {
        let s = f64::from(t.sign);
        // already at zero and heading to the wrong side
        if s * t.coef <= ZERO_TOL * (1.0 + nu.abs()) && s * nu < 0.0 {
            if best > 0.0 {
                best = 0.0;
                leaver = Some(t.pattern.clone());
            }
            continue;
        }
        let ratio = -t.coef / nu;
        if ratio > 0.0 && ratio < best {
            best = ratio;
            leaver = Some(t.pattern.clone());
        }
    }
    (best, leaver)
}

/// Outcome of a join search.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinStep {
    /// Step to the first inclusion, `∞` when none occurs before the cap.
    pub delta: f64,
    pub joiner: Option<Pattern>,
    /// Side of `±λ` the joiner's correlation reaches.
    pub sign: i8,
    pub gamma: f64,
    pub nodes_visited: u64,
    /// False when a node budget or deadline stopped the search.
    pub completed: bool,
}

/// Restrictions on a join search.
#[derive(Debug, Clone, Default)]
pub struct JoinLimits {
    /// Only inclusions with `Δ < cap` are reported.
    pub cap: Option<f64>,
    /// Patterns that just left; they cannot rejoin with their previous sign.
    pub exclude: Vec<Pattern>,
    pub node_budget: Option<u64>,
    pub deadline: Option<Instant>,
}

/// Exact `Δ²` over all inactive patterns, with subtree pruning when
/// `cfg.prune` is set.
pub fn step_join(kink: &Kink, z: &CovariateMatrix, cfg: &FitConfig) -> JoinStep {
    step_join_with(kink, z, cfg, &JoinLimits::default())
}

pub fn step_join_with(
    kink: &Kink,
    z: &CovariateMatrix,
    cfg: &FitConfig,
    limits: &JoinLimits,
) -> JoinStep {
    let lambda = cfg.lambda;
    let l2 = cfg.l2_weight;
    let w = &kink.residual;
    let v = &kink.residual_direction;
    let test = z.rows() - 1;

    // Reference lines `a_k − Δ·b_k` of the pruning right-hand side.
    let reference: Vec<(f64, f64)> = if kink.active.is_empty() {
        Vec::new()
    } else {
        kink.active
            .iter()
            .zip(&kink.nu)
            .map(|(t, &nu)| {
                let col = materialize(&t.pattern, z).expect("active patterns are valid");
                let rho_bar = col.dot(w) - l2 * t.coef;
                let eta_bar = col.dot(v) + l2 * nu;
                (rho_bar.abs(), eta_bar.abs() + col.entry(test))
            })
            .collect()
    };
    let rhs_at = |delta: f64| -> f64 {
        if reference.is_empty() {
            lambda
        } else {
            reference
                .iter()
                .map(|&(a, b)| if delta.is_finite() { a - delta * b } else if b == 0.0 { a } else { f64::NEG_INFINITY })
                .fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let margin = PRUNE_MARGIN_RTOL * (1.0 + lambda);
    let boundary_tol = BOUNDARY_RTOL * (1.0 + lambda);

    let is_active = |items: &[u32]| {
        kink.active
            .binary_search_by(|t| t.pattern.items().cmp(items))
            .is_ok()
    };
    let excluded = |items: &[u32]| limits.exclude.iter().any(|p| p.items() == items);

    let mut best = limits.cap.unwrap_or(f64::INFINITY);
    let mut joiner: Option<Vec<u32>> = None;
    let mut sign = 0i8;
    let mut gamma_best = 0.0;
    let mut budget_hit = false;
    let mut count = 0u64;

    let stats = walk(z, cfg.max_order, |node| {
        count += 1;
        if limits.node_budget.is_some_and(|b| count > b)
            || (count % 4096 == 0 && limits.deadline.is_some_and(|d| Instant::now() >= d))
        {
            budget_hit = true;
            return Visit::Stop;
        }
        let col = node.column;
        let (wp, wn) = col.split_sums(w);
        let (vp, vn) = col.split_sums(v);
        let x_test = match col.support.last() {
            Some(&i) if i as usize == test => col.value_at(col.support.len() - 1),
            _ => 0.0,
        };
        let bv = vp.max(vn);
        if !is_active(node.items) {
            let rho = wp - wn;
            let gamma = x_test - (vp - vn);
            let s = if gamma > 0.0 { 1.0 } else { -1.0 };
            // the pattern that just left may only re-enter at the opposite bound
            let blocked = excluded(node.items) && s * rho > 0.0;
            if !blocked && gamma.abs() > GAMMA_RTOL * (1.0 + bv) {
                // already on the boundary and moving outward: joins at once
                let delta = if s * rho >= lambda - boundary_tol {
                    0.0
                } else {
                    (lambda * s - rho) / gamma
                };
                if delta >= 0.0 && delta < best {
                    best = delta;
                    joiner = Some(node.items.to_vec());
                    sign = s as i8;
                    gamma_best = gamma;
                }
            }
        }
        if cfg.prune {
            let bw = wp.max(wn);
            let lhs = if best.is_finite() {
                bw + best * (bv + x_test)
            } else if bv + x_test == 0.0 {
                bw
            } else {
                f64::INFINITY
            };
            if lhs < rhs_at(best) - margin {
                return Visit::Prune;
            }
        }
        Visit::Descend
    });

    JoinStep {
        delta: if joiner.is_some() { best } else { f64::INFINITY },
        joiner: joiner.map(|items| Pattern::from_sorted(&items)),
        sign,
        gamma: gamma_best,
        nodes_visited: stats.visited.min(count),
        completed: !budget_hit,
    }
}

/// Active pattern with its cached column.
struct Term {
    pattern: Pattern,
    col: PatternColumn,
    coef: f64,
    sign: i8,
}

/// Computes the τ-path over `range` for the problem whose last row of `z`
/// is the test row and whose labeled responses are `y`.
pub fn compute_tau_path(
    z: &CovariateMatrix,
    y: &[f64],
    range: (f64, f64),
    cfg: &FitConfig,
) -> Result<TauPath> {
    compute_tau_path_with(z, y, range, cfg, &PathOptions::default())
}

pub fn compute_tau_path_with(
    z: &CovariateMatrix,
    y: &[f64],
    range: (f64, f64),
    cfg: &FitConfig,
    opts: &PathOptions,
) -> Result<TauPath> {
    cfg.validate()?;
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("invalid τ range [{lo}, {hi}]")));
    }
    if y.len() + 1 != z.rows() {
        return Err(Error::Dimension {
            context: "τ-path responses",
            expected: z.rows() - 1,
            got: y.len(),
        });
    }
    let rows = z.rows();
    let max_kinks = opts.max_kinks.unwrap_or(100_000);

    let start = fit(z, &augmented_response(y, lo), cfg)?;
    let mut terms: Vec<Term> = start
        .active
        .iter()
        .map(|t| {
            Ok(Term {
                pattern: t.pattern.clone(),
                col: materialize(&t.pattern, z)?,
                coef: t.coef,
                sign: t.sign,
            })
        })
        .collect::<Result<_>>()?;

    let mut path = TauPath {
        kinks: Vec::new(),
        lambda: cfg.lambda,
        l2_weight: cfg.l2_weight,
        range,
        stats: PathStats::default(),
    };
    let mut tau = lo;
    let mut event = Event::Start;
    let mut excluded: Vec<Pattern> = Vec::new();
    let mut nodes_used = 0u64;
    let mut merge_into_previous = false;

    loop {
        let cols: Vec<PatternColumn> = terms.iter().map(|t| t.col.clone()).collect();
        let system = ActiveSystem::factor(&cols, cfg.l2_weight, rows)?;
        let y_tau = augmented_response(y, tau);
        let mut residual = y_tau.clone();
        for t in &terms {
            let view = t.col.view();
            for (q, &i) in t.col.support.iter().enumerate() {
                residual[i as usize] -= t.coef * view.value_at(q);
            }
        }
        let mut kink = Kink {
            tau,
            active: terms
                .iter()
                .map(|t| ActiveTerm {
                    pattern: t.pattern.clone(),
                    coef: t.coef,
                    sign: t.sign,
                })
                .collect(),
            event: event.clone(),
            nu: system.nu.clone(),
            residual,
            residual_direction: system.v.clone(),
            joiner_gamma: None,
            nodes_visited: 0,
            degenerate: false,
        };
        if merge_into_previous {
            path.kinks.pop();
            path.stats.nodes_per_step.pop();
            kink.degenerate = true;
            path.stats.coalesced += 1;
        }

        if tau >= hi {
            path.kinks.push(kink);
            break;
        }
        if path.kinks.len() >= max_kinks {
            path.kinks.push(kink);
            return Err(budget(BudgetKind::Kinks, path));
        }

        let (delta1, leaver) = step_leave(&kink);
        let remaining = hi - tau;
        let limits = JoinLimits {
            cap: Some(delta1.min(remaining)),
            exclude: excluded.clone(),
            node_budget: opts.node_budget.map(|b| b.saturating_sub(nodes_used)),
            deadline: opts.deadline,
        };
        let join = step_join_with(&kink, z, cfg, &limits);
        kink.nodes_visited = join.nodes_visited;
        nodes_used += join.nodes_visited;
        path.stats.nodes_per_step.push(join.nodes_visited);
        path.stats.total_nodes += join.nodes_visited;
        if !join.completed {
            path.kinks.push(kink);
            let kind = if opts.node_budget.is_some_and(|b| nodes_used >= b) {
                BudgetKind::Nodes
            } else {
                BudgetKind::WallClock
            };
            return Err(budget(kind, path));
        }

        let leave_first = leaver.is_some() && delta1 <= remaining && delta1 <= join.delta + TIE_TOL;
        if leave_first && (join.delta - delta1).abs() <= TIE_TOL {
            path.stats.ties += 1;
        }
        let delta = if leave_first {
            delta1
        } else if join.joiner.is_some() {
            kink.joiner_gamma = Some(join.gamma);
            join.delta
        } else {
            remaining
        };

        let next_tau = if delta >= remaining { hi } else { tau + delta };
        let step = next_tau - tau;
        for (t, nu) in terms.iter_mut().zip(&system.nu) {
            t.coef += step * nu;
        }
        path.kinks.push(kink);
        merge_into_previous = delta < COALESCE_TOL;
        tau = next_tau;

        if leave_first {
            let gone = leaver.expect("leave event has a pattern");
            terms.retain(|t| t.pattern != gone);
            event = Event::Leave {
                pattern: gone.clone(),
            };
            if !merge_into_previous {
                excluded.clear();
            }
            excluded.push(gone);
        } else if let Some(p) = join.joiner {
            let col = materialize(&p, z)?;
            let pos = terms.partition_point(|t| t.pattern < p);
            terms.insert(
                pos,
                Term {
                    pattern: p.clone(),
                    col,
                    coef: 0.0,
                    sign: join.sign,
                },
            );
            event = Event::Join {
                pattern: p,
                sign: join.sign,
            };
            excluded.clear();
        } else {
            event = Event::End;
        }
        if tau >= hi {
            merge_into_previous = false;
            event = Event::End;
        }
    }

    path.stats.kink_count = path.kinks.len();
    Ok(path)
}

fn budget(what: BudgetKind, mut path: TauPath) -> Error {
    path.stats.kink_count = path.kinks.len();
    Error::Budget {
        what,
        kinks: path.kinks.len(),
        partial: Box::new(path),
    }
}
