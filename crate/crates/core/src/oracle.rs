//! Brute-force reference implementations: explicit enumeration of every
//! interaction column, a dense coordinate-descent LASSO polished with a
//! direct solve, and grid-refit conformal sets. Nothing here goes through
//! the tree walker, the column-generation solver or the τ-path code.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::conformal::{ConformalSet, SCORE_TIE_RTOL};
use crate::error::{Error, Result};
use crate::patterns::{pattern_count, CovariateMatrix, Pattern};

pub const DEFAULT_CAP: usize = 100_000;
const KKT_TOL: f64 = 1e-11;
const CD_SWEEPS: usize = 1_000_000;

/// Every interaction column of order ≤ `max_order`, as dense vectors.
#[derive(Debug, Clone)]
pub struct DenseExpansion {
    pub patterns: Vec<Pattern>,
    pub columns: Vec<Vec<f64>>,
    pub max_order: usize,
    pub rows: usize,
}

impl DenseExpansion {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn dot(&self, j: usize, a: &[f64]) -> f64 {
        self.columns[j].iter().zip(a).map(|(x, y)| x * y).sum()
    }

    /// `Xβ` for a full coefficient vector.
    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (col, &b) in self.columns.iter().zip(beta) {
            if b != 0.0 {
                for (o, x) in out.iter_mut().zip(col) {
                    *o += b * x;
                }
            }
        }
        out
    }

    pub fn index_of(&self, p: &Pattern) -> Option<usize> {
        self.patterns.iter().position(|q| q == p)
    }
}

/// Enumerates all patterns of order ≤ `max_order` in depth-first
/// lexicographic order.
pub fn expand(z: &CovariateMatrix, max_order: usize, cap: usize) -> Result<DenseExpansion> {
    let m = z.m();
    let d = max_order.min(m);
    let p = pattern_count(m, d);
    if p > cap as u128 {
        return Err(Error::Size { p, cap });
    }
    let mut out = DenseExpansion {
        patterns: Vec::with_capacity(p as usize),
        columns: Vec::with_capacity(p as usize),
        max_order: d,
        rows: z.rows(),
    };
    let mut stack: Vec<u32> = Vec::new();
    fn rec(z: &CovariateMatrix, d: usize, start: usize, stack: &mut Vec<u32>, out: &mut DenseExpansion) {
        for j in start..z.m() {
            stack.push(j as u32);
            let col: Vec<f64> = (0..z.rows())
                .map(|i| stack.iter().map(|&k| z.get(i, k as usize)).product())
                .collect();
            out.patterns.push(Pattern::new(stack.clone(), z.m()).expect("valid by construction"));
            out.columns.push(col);
            if stack.len() < d {
                rec(z, d, j + 1, stack, out);
            }
            stack.pop();
        }
    }
    rec(z, d, 0, &mut stack, &mut out);
    Ok(out)
}

fn soft(c: f64, t: f64) -> f64 {
    if c > t {
        c - t
    } else if c < -t {
        c + t
    } else {
        0.0
    }
}

/// Worst KKT violation of `beta` for `½‖y − Xβ‖² + λ‖β‖₁ + ½ l2‖β‖²`.
pub fn kkt_violation(exp: &DenseExpansion, y: &[f64], beta: &[f64], lambda: f64, l2: f64) -> f64 {
    let fitted = exp.predict(beta);
    let w: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    (0..exp.len())
        .map(|j| {
            let g = exp.dot(j, &w) - l2 * beta[j];
            if beta[j] != 0.0 {
                (g - lambda * beta[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Certified minimizer over the explicit columns, optionally warm-started.
pub fn dense_lasso(
    exp: &DenseExpansion,
    y: &[f64],
    lambda: f64,
    l2: f64,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if y.len() != exp.rows {
        return Err(Error::Dimension {
            context: "oracle response",
            expected: exp.rows,
            got: y.len(),
        });
    }
    let p = exp.len();
    let norms: Vec<f64> = exp.columns.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let mut beta = warm.map_or_else(|| vec![0.0; p], |w| w.to_vec());
    let fitted = exp.predict(&beta);
    let mut w: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let tol = KKT_TOL * (1.0 + lambda);

    for _round in 0..50 {
        for _ in 0..CD_SWEEPS {
            let mut max_step: f64 = 0.0;
            for j in 0..p {
                if norms[j] == 0.0 {
                    continue;
                }
                let c = exp.dot(j, &w) + norms[j] * beta[j];
                let new = soft(c, lambda) / (norms[j] + l2);
                let d = new - beta[j];
                if d != 0.0 {
                    for (wi, x) in w.iter_mut().zip(&exp.columns[j]) {
                        *wi -= d * x;
                    }
                    beta[j] = new;
                    max_step = max_step.max(d.abs() * norms[j].sqrt());
                }
            }
            if max_step < 1e-13 {
                break;
            }
        }
        if let Some(polished) = polish(exp, y, &beta, lambda, l2) {
            if kkt_violation(exp, y, &polished, lambda, l2) <= tol {
                return Ok(polished);
            }
        }
        if kkt_violation(exp, y, &beta, lambda, l2) <= tol {
            return Ok(beta);
        }
        let fitted = exp.predict(&beta);
        w = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    }
    Err(Error::Numeric(format!(
        "oracle lasso not certified: KKT violation {:e}",
        kkt_violation(exp, y, &beta, lambda, l2)
    )))
}

/// Direct solve on the support of `beta` with its signs held fixed.
fn polish(exp: &DenseExpansion, y: &[f64], beta: &[f64], lambda: f64, l2: f64) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    if support.is_empty() {
        return Some(beta.to_vec());
    }
    let k = support.len();
    let x = DMatrix::from_fn(exp.rows, k, |i, a| exp.columns[support[a]][i]);
    let gram = x.transpose() * &x + DMatrix::identity(k, k) * l2;
    let yv = DVector::from_column_slice(y);
    let signs = DVector::from_fn(k, |a, _| beta[support[a]].signum());
    let rhs = x.transpose() * yv - signs.clone() * lambda;
    let sol = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.svd(true, true).solve(&rhs, 1e-12).ok()?,
    };
    if (0..k).any(|a| sol[a] * signs[a] <= 0.0) {
        return None;
    }
    let mut out = vec![0.0; beta.len()];
    for (a, &j) in support.iter().enumerate() {
        out[j] = sol[a];
    }
    Some(out)
}

/// Grid approximation of a full conformal set.
#[derive(Debug, Clone)]
pub struct GridConformal {
    /// Cell centres.
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Union of the cells whose centre is accepted.
    pub set: ConformalSet,
    pub cell: f64,
}

impl GridConformal {
    pub fn accepted(&self, k: usize) -> bool {
        self.p_values[k] >= self.set.alpha - 1e-12
    }
}

/// Refits at `grid_size` cell centres of `range`. `z` holds the labeled
/// rows followed by the test row; `y` the labeled responses.
#[allow(clippy::too_many_arguments)]
pub fn grid_conformal(
    z: &CovariateMatrix,
    y: &[f64],
    max_order: usize,
    lambda: f64,
    l2: f64,
    alpha: f64,
    grid_size: usize,
    range: (f64, f64),
) -> Result<GridConformal> {
    if grid_size < 100 {
        return Err(Error::Config(format!("grid size must be at least 100, got {grid_size}")));
    }
    if y.len() + 1 != z.rows() {
        return Err(Error::Dimension {
            context: "oracle responses",
            expected: z.rows() - 1,
            got: y.len(),
        });
    }
    let exp = expand(z, max_order, DEFAULT_CAP)?;
    let (lo, hi) = range;
    let cell = (hi - lo) / grid_size as f64;
    let grid: Vec<f64> = (0..grid_size).map(|k| lo + (k as f64 + 0.5) * cell).collect();

    // Warm starts within contiguous chunks.
    let chunk = 100;
    let p_values: Vec<f64> = grid
        .par_chunks(chunk)
        .map(|taus| -> Result<Vec<f64>> {
            let mut warm: Option<Vec<f64>> = None;
            let mut out = Vec::with_capacity(taus.len());
            for &tau in taus {
                let mut yt = y.to_vec();
                yt.push(tau);
                let beta = dense_lasso(&exp, &yt, lambda, l2, warm.as_deref())?;
                let fitted = exp.predict(&beta);
                let scores: Vec<f64> = yt.iter().zip(&fitted).map(|(a, b)| (a - b).abs()).collect();
                let test = scores[scores.len() - 1];
                let cut = test + SCORE_TIE_RTOL * test.abs().max(1.0);
                let count = scores.iter().filter(|&&s| s <= cut).count();
                out.push(1.0 - count as f64 / scores.len() as f64);
                warm = Some(beta);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let cells: Vec<(f64, f64)> = (0..grid_size)
        .filter(|&k| p_values[k] >= alpha - 1e-12)
        .map(|k| (lo + k as f64 * cell, lo + (k + 1) as f64 * cell))
        .collect();
    Ok(GridConformal {
        grid,
        p_values,
        set: ConformalSet::from_intervals(cells, alpha, range),
        cell,
    })
}
