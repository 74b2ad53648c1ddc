//! Full and split conformal prediction sets.
//!
//! The conformity score of row `i` at candidate label `τ` is the absolute
//! residual `|w_i(τ)|` of the model fit on the augmented data, and
//! `π(τ) = 1 − #{i : S_i(τ) ≤ S_test(τ)} / (n+1)`. The full conformal set is
//! `{τ : π(τ) ≥ α}`. On a path segment every residual is affine in `τ`, so
//! ranks only change where `|w_i| = |w_test|`; `π` is evaluated once per
//! piece between such crossings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::CovariateMatrix;
use crate::solver::{fit, FitConfig, ModelState};
use crate::taupath::{compute_tau_path_with, Kink, PathOptions, TauPath};

/// Slack when comparing `π` with `α`, so that `π = α` exactly is kept.
const PI_SLACK: f64 = 1e-12;
/// Relative tolerance under which two conformity scores are equal.
pub const SCORE_TIE_RTOL: f64 = 1e-9;
/// Crossings closer than this are merged.
const CROSSING_DEDUP: f64 = 1e-12;

/// Union of disjoint half-open intervals `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalSet {
    pub intervals: Vec<(f64, f64)>,
    pub alpha: f64,
    /// The set reaches an end of the search range.
    pub clipped: bool,
    pub range: (f64, f64),
}

impl ConformalSet {
    pub fn empty(alpha: f64, range: (f64, f64)) -> Self {
        Self {
            intervals: Vec::new(),
            alpha,
            clipped: false,
            range,
        }
    }

    /// Builds a set from arbitrary intervals: drops empty ones, sorts and
    /// merges overlapping or touching ones.
    pub fn from_intervals(mut raw: Vec<(f64, f64)>, alpha: f64, range: (f64, f64)) -> Self {
        raw.retain(|&(lo, hi)| lo < hi);
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (lo, hi) in raw {
            match intervals.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => intervals.push((lo, hi)),
            }
        }
        let clipped = intervals
            .first()
            .is_some_and(|&(lo, _)| lo <= range.0)
            || intervals.last().is_some_and(|&(_, hi)| hi >= range.1);
        Self {
            intervals,
            alpha,
            clipped,
            range,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, tau: f64) -> bool {
        let k = self.intervals.partition_point(|&(lo, _)| lo <= tau);
        k > 0 && tau < self.intervals[k - 1].1
    }

    /// Total Lebesgue measure.
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn hull(&self) -> Option<(f64, f64)> {
        Some((self.intervals.first()?.0, self.intervals.last()?.1))
    }

    pub fn hull_length(&self) -> f64 {
        self.hull().map_or(0.0, |(lo, hi)| hi - lo)
    }
}

/// `1 − #{i : S_i ≤ S_last} / len`, with the last entry the test score.
/// Scores within [`SCORE_TIE_RTOL`] (relative) of the test score count as
/// ties.
pub fn p_value(scores: &[f64]) -> f64 {
    assert!(scores.len() >= 2, "p_value needs at least two scores");
    let test = scores[scores.len() - 1];
    let cut = test + SCORE_TIE_RTOL * test.abs().max(1.0);
    let count = scores.iter().filter(|&&s| s <= cut).count();
    1.0 - count as f64 / scores.len() as f64
}

/// Points strictly inside `(kink.tau, next_tau)` where some labeled residual
/// has the same magnitude as the test residual.
pub fn segment_crossings(kink: &Kink, next_tau: f64) -> Vec<f64> {
    let len = next_tau - kink.tau;
    let last = kink.residual.len() - 1;
    let a_t = kink.residual[last];
    let c_t = 1.0 - kink.residual_direction[last];
    let mut out = Vec::new();
    let mut push = |d: f64| {
        if d > 0.0 && d < len {
            out.push(kink.tau + d);
        }
    };
    for i in 0..last {
        let a = kink.residual[i];
        let b = kink.residual_direction[i];
        // a − d·b = a_t + d·c_t
        let den = b + c_t;
        if den != 0.0 {
            push((a - a_t) / den);
        }
        // a − d·b = −(a_t + d·c_t)
        let den = c_t - b;
        if den != 0.0 {
            push(-(a + a_t) / den);
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|b, a| (*b - *a).abs() <= CROSSING_DEDUP);
    out.retain(|&t| t < next_tau);
    out
}

fn p_value_on(kink: &Kink, tau: f64) -> f64 {
    let w = kink.residual_at(tau);
    let scores: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    p_value(&scores)
}

/// Exact full conformal set from a τ-path.
pub fn full_cp(path: &TauPath, alpha: f64) -> Result<ConformalSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut raw = Vec::new();
    for pair in path.kinks.windows(2) {
        let (kink, next) = (&pair[0], &pair[1]);
        if next.tau <= kink.tau {
            continue;
        }
        let mut cuts = vec![kink.tau];
        cuts.extend(segment_crossings(kink, next.tau));
        cuts.push(next.tau);
        for piece in cuts.windows(2) {
            let (lo, hi) = (piece[0], piece[1]);
            if hi <= lo {
                continue;
            }
            if p_value_on(kink, 0.5 * (lo + hi)) >= alpha - PI_SLACK {
                raw.push((lo, hi));
            }
        }
    }
    Ok(ConformalSet::from_intervals(raw, alpha, path.range))
}

/// `[min y − spread, max y + spread]` with `spread = max y − min y`.
pub fn default_range(y: &[f64]) -> (f64, f64) {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo).max(f64::EPSILON * hi.abs().max(1.0));
    (lo - spread, hi + spread)
}

/// Full conformal set for one test covariate vector, together with the path
/// it was read from.
pub fn full_cp_point(
    z: &CovariateMatrix,
    y: &[f64],
    x_test: &[f64],
    cfg: &FitConfig,
    alpha: f64,
    range: Option<(f64, f64)>,
    opts: &PathOptions,
) -> Result<(ConformalSet, TauPath)> {
    if y.len() != z.rows() {
        return Err(Error::Dimension {
            context: "training responses",
            expected: z.rows(),
            got: y.len(),
        });
    }
    let aug = z.with_test_row(x_test)?;
    let range = range.unwrap_or_else(|| default_range(y));
    let path = compute_tau_path_with(&aug, y, range, cfg, opts)?;
    let set = full_cp(&path, alpha)?;
    Ok((set, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub interval: (f64, f64),
    pub center: f64,
    /// `∞` when the quantile index exceeds the calibration size.
    pub q: f64,
    pub calibration_scores: Vec<f64>,
    pub unbounded: bool,
}

impl SplitResult {
    pub fn contains(&self, y: f64) -> bool {
        self.interval.0 <= y && y <= self.interval.1
    }

    pub fn length(&self) -> f64 {
        2.0 * self.q
    }
}

/// `⌈(1−α)(n+1)⌉`-th smallest score, or `∞` if that exceeds `n`.
pub fn split_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let k = ((1.0 - alpha) * (n as f64 + 1.0) - 1e-9).ceil().max(1.0) as usize;
    if k > n {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

pub fn split_cp(
    z_train: &CovariateMatrix,
    y_train: &[f64],
    z_cal: &CovariateMatrix,
    y_cal: &[f64],
    x_test: &[f64],
    cfg: &FitConfig,
    alpha: f64,
) -> Result<SplitResult> {
    let model = split_model(z_train, y_train, cfg)?;
    split_from_model(&model, z_cal, y_cal, x_test, alpha)
}

/// Model fit once on the training split, reusable for many test points.
pub fn split_model(
    z_train: &CovariateMatrix,
    y_train: &[f64],
    cfg: &FitConfig,
) -> Result<ModelState> {
    if y_train.len() != z_train.rows() {
        return Err(Error::Dimension {
            context: "training responses",
            expected: z_train.rows(),
            got: y_train.len(),
        });
    }
    fit(z_train, y_train, cfg)
}

pub fn split_from_model(
    model: &ModelState,
    z_cal: &CovariateMatrix,
    y_cal: &[f64],
    x_test: &[f64],
    alpha: f64,
) -> Result<SplitResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if z_cal.rows() == 0 || y_cal.len() != z_cal.rows() {
        return Err(Error::Dimension {
            context: "calibration responses",
            expected: z_cal.rows(),
            got: y_cal.len(),
        });
    }
    let scores: Vec<f64> = (0..z_cal.rows())
        .map(|i| (y_cal[i] - model.predict(&z_cal.row(i))).abs())
        .collect();
    let q = split_quantile(&scores, alpha);
    let center = model.predict(x_test);
    Ok(SplitResult {
        interval: (center - q, center + q),
        center,
        q,
        calibration_scores: scores,
        unbounded: q.is_infinite(),
    })
}

/// Result for one test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: usize,
    pub intervals: Vec<(f64, f64)>,
    pub alpha: f64,
    pub truth: f64,
    pub covered: bool,
    pub length: f64,
    pub hull_length: f64,
    /// Point prediction used for r².
    pub prediction: Option<f64>,
    pub kinks: usize,
    pub nodes_visited: u64,
    pub clipped: bool,
}

impl PointRecord {
    pub fn from_full(id: usize, set: &ConformalSet, path: &TauPath, truth: f64, prediction: Option<f64>) -> Self {
        Self {
            id,
            intervals: set.intervals.clone(),
            alpha: set.alpha,
            truth,
            covered: set.contains(truth),
            length: set.measure(),
            hull_length: set.hull_length(),
            prediction,
            kinks: path.kinks.len(),
            nodes_visited: path.stats.total_nodes,
            clipped: set.clipped,
        }
    }

    pub fn from_split(id: usize, res: &SplitResult, alpha: f64, truth: f64) -> Self {
        Self {
            id,
            intervals: vec![res.interval],
            alpha,
            truth,
            covered: res.contains(truth),
            length: res.length(),
            hull_length: res.length(),
            prediction: Some(res.center),
            kinks: 0,
            nodes_visited: 0,
            clipped: res.unbounded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub points: usize,
    pub coverage: f64,
    /// Mean total measure.
    pub length: f64,
    pub hull_length: f64,
    pub r2: Option<f64>,
    pub mean_kinks: f64,
    pub mean_nodes_visited: f64,
    pub clipped: usize,
}

pub fn evaluate(records: &[PointRecord]) -> Result<ExperimentReport> {
    if records.is_empty() {
        return Err(Error::Data("no test points to evaluate".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&PointRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.prediction.map(|p| (r.truth, p)))
        .collect();
    let r2 = (pairs.len() >= 2).then(|| {
        let ybar = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum();
        let ss_tot: f64 = pairs.iter().map(|(y, _)| (y - ybar).powi(2)).sum();
        1.0 - ss_res / ss_tot
    });
    Ok(ExperimentReport {
        points: records.len(),
        coverage: mean(&|r| if r.covered { 1.0 } else { 0.0 }),
        length: mean(&|r| r.length),
        hull_length: mean(&|r| r.hull_length),
        r2,
        mean_kinks: mean(&|r| r.kinks as f64),
        mean_nodes_visited: mean(&|r| r.nodes_visited as f64),
        clipped: records.iter().filter(|r| r.clipped).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taupath::Event;

    #[test]
    fn p_value_examples() {
        assert!((p_value(&[3.0, 5.0, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p_value(&[1.0, 2.0, 2.0]), 0.0);
        assert_eq!(p_value(&[4.0; 5]), 0.0);
    }

    fn flat_kink(w: &[f64]) -> Kink {
        Kink {
            tau: 0.0,
            active: vec![],
            event: Event::Start,
            nu: vec![],
            residual: w.to_vec(),
            residual_direction: vec![0.0; w.len()],
            joiner_gamma: None,
            nodes_visited: 0,
            degenerate: false,
        }
    }

    #[test]
    fn crossings_with_flat_rows() {
        // test residual is τ itself; rows at ±1 and 2
        let k = flat_kink(&[1.0, -2.0, 0.0]);
        let mut k2 = k.clone();
        k2.tau = -5.0;
        k2.residual[2] = -5.0;
        assert_eq!(segment_crossings(&k2, 5.0), vec![-2.0, -1.0, 1.0, 2.0]);
        assert_eq!(segment_crossings(&k, 1.5), vec![1.0]);
    }

    #[test]
    fn parallel_lines_do_not_cross() {
        let mut k = flat_kink(&[1.0, 0.0]);
        k.residual_direction = vec![-1.0, 0.0];
        // w_0 = 1 + d and w_t = d are parallel on the + branch
        let c = segment_crossings(&k, 10.0);
        assert!(c.is_empty(), "{c:?}");
    }

    #[test]
    fn set_construction_and_measure() {
        let s = ConformalSet::from_intervals(vec![(2.0, 3.0), (0.0, 1.0), (1.0, 1.5), (5.0, 5.0)], 0.1, (-10.0, 10.0));
        assert_eq!(s.intervals, vec![(0.0, 1.5), (2.0, 3.0)]);
        assert!((s.measure() - 2.5).abs() < 1e-15);
        assert_eq!(s.hull_length(), 3.0);
        assert!(s.contains(0.0) && !s.contains(1.5) && !s.contains(3.0));
        assert!(!s.clipped);
        let c = ConformalSet::from_intervals(vec![(-10.0, 0.0)], 0.1, (-10.0, 10.0));
        assert!(c.clipped);
    }

    #[test]
    fn split_quantile_index() {
        let s = [3.0, 1.0, 2.0, 5.0, 4.0, 6.0, 7.0, 8.0, 9.0];
        // ⌈0.9 · 10⌉ = 9
        assert_eq!(split_quantile(&s, 0.1), 9.0);
        assert_eq!(split_quantile(&s, 0.5), 5.0);
        assert_eq!(split_quantile(&s, 0.01), f64::INFINITY);
        assert_eq!(split_quantile(&[2.5; 4], 0.2), 2.5);
    }

    #[test]
    fn evaluate_trivial_sets() {
        let rec = |covered, length| PointRecord {
            id: 0,
            intervals: vec![],
            alpha: 0.1,
            truth: 0.0,
            covered,
            length,
            hull_length: length,
            prediction: None,
            kinks: 2,
            nodes_visited: 0,
            clipped: false,
        };
        let all = evaluate(&[rec(true, 4.0), rec(true, 2.0)]).unwrap();
        assert_eq!(all.coverage, 1.0);
        assert_eq!(all.length, 3.0);
        assert!(all.r2.is_none());
        let none = evaluate(&[rec(false, 0.0)]).unwrap();
        assert_eq!((none.coverage, none.length), (0.0, 0.0));
        assert!(evaluate(&[]).is_err());
    }
}
