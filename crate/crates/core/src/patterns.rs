//! Interaction patterns, their design-matrix columns, and the anti-monotone
//! bounds that drive subtree pruning.
//!
//! A pattern is a set of original covariate indices; its column is the
//! elementwise product of those covariates. Patterns are organised as a
//! prefix tree where each child extends its parent by one index strictly
//! larger than the parent's largest index, so every subset appears exactly
//! once and a depth-first pre-order walk visits patterns in lexicographic
//! order. Because a child's column is the parent's column multiplied by a
//! value in `[0, 1]`, every quantity of the form `Σ |a_i| x_iℓ` can only
//! shrink down the tree.
//!
//! Indices are zero-based throughout the crate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interaction term: a strictly increasing, non-empty list of covariate
/// indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pattern {
    items: Vec<u32>,
}

impl Pattern {
    /// Builds a pattern from items in any order. Duplicates and indices
    /// `>= m` are rejected.
    pub fn new(mut items: Vec<u32>, m: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidPattern {
                items,
                reason: "pattern must contain at least one covariate".into(),
            });
        }
        items.sort_unstable();
        if let Some(&bad) = items.iter().find(|&&i| i as usize >= m) {
            return Err(Error::InvalidPattern {
                reason: format!("index {bad} out of range for {m} covariates"),
                items,
            });
        }
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPattern {
                items,
                reason: "duplicate covariate index".into(),
            });
        }
        Ok(Self { items })
    }

    /// Single-covariate pattern.
    pub fn singleton(j: u32) -> Self {
        Self { items: vec![j] }
    }

    /// Trusted constructor for items already known to be strictly increasing.
    pub(crate) fn from_sorted(items: &[u32]) -> Self {
        debug_assert!(!items.is_empty());
        debug_assert!(items.windows(2).all(|w| w[0] < w[1]));
        Self {
            items: items.to_vec(),
        }
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    /// Interaction order.
    pub fn order(&self) -> usize {
        self.items.len()
    }

    pub fn last(&self) -> u32 {
        *self.items.last().expect("patterns are non-empty")
    }

    /// True when `self` is a strict superset of `other`.
    pub fn extends(&self, other: &Pattern) -> bool {
        self.items.len() > other.items.len() && other.items.iter().all(|i| self.items.contains(i))
    }

    /// Human-readable name built from feature names, e.g. `z1*z3`.
    pub fn label(&self, names: &[String]) -> String {
        self.items
            .iter()
            .map(|&i| {
                names
                    .get(i as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("#{i}"))
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.items.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

/// Canonical children: extensions by one index strictly greater than the
/// pattern's largest index.
pub fn children(pattern: &Pattern, m: usize) -> Vec<Pattern> {
    (pattern.last() as usize + 1..m)
        .map(|j| {
            let mut items = pattern.items.clone();
            items.push(j as u32);
            Pattern { items }
        })
        .collect()
}

/// Children of the (empty) root: all singletons.
pub fn root_children(m: usize) -> Vec<Pattern> {
    (0..m as u32).map(Pattern::singleton).collect()
}

/// Number of patterns of order `1..=max_order` over `m` covariates.
pub fn pattern_count(m: usize, max_order: usize) -> u128 {
    let mut total = 0u128;
    let mut binom = 1u128;
    for k in 1..=max_order.min(m) {
        binom = binom * (m - k + 1) as u128 / k as u128;
        total += binom;
    }
    total
}

/// Original covariates for the labeled rows followed (by convention) by the
/// test row. Stored column-major; entries are in `[0, 1]` and exactly
/// binary unless built with [`CovariateMatrix::from_unit_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    rows: usize,
    m: usize,
    data: Vec<f64>,
    binary: bool,
}

impl CovariateMatrix {
    /// Binary covariates, one inner vector per row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::build(rows, true)
    }

    /// Covariates with entries in `[0, 1]`.
    pub fn from_unit_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::build(rows, false)
    }

    fn build(rows: &[Vec<f64>], binary: bool) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Data("covariate matrix needs at least one row".into()));
        }
        let m = rows[0].len();
        if m == 0 {
            return Err(Error::Data("covariate matrix needs at least one column".into()));
        }
        let mut data = vec![0.0; n * m];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension {
                    context: "covariate row",
                    expected: m,
                    got: row.len(),
                });
            }
            for (j, &x) in row.iter().enumerate() {
                let ok = if binary {
                    x == 0.0 || x == 1.0
                } else {
                    (0.0..=1.0).contains(&x)
                };
                if !ok {
                    return Err(Error::Data(format!(
                        "entry ({i}, {j}) = {x} is not {}",
                        if binary { "0 or 1" } else { "in [0, 1]" }
                    )));
                }
                data[j * n + i] = x;
            }
        }
        Ok(Self {
            rows: n,
            m,
            data,
            binary,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.m).map(|j| self.get(i, j)).collect()
    }

    /// Copy with `x` appended as the last row.
    pub fn with_test_row(&self, x: &[f64]) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = (0..self.rows).map(|i| self.row(i)).collect();
        if x.len() != self.m {
            return Err(Error::Dimension {
                context: "test row",
                expected: self.m,
                got: x.len(),
            });
        }
        rows.push(x.to_vec());
        Self::build(&rows, self.binary)
    }

    /// Copy restricted to the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.row(i)).collect();
        Self::build(&rows, self.binary)
    }
}

/// Column of one pattern, stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternColumn {
    pub pattern: Pattern,
    /// Rows with a nonzero entry, increasing.
    pub support: Vec<u32>,
    /// Entry values aligned with `support`; `None` means every entry is 1.
    pub values: Option<Vec<f64>>,
    /// Full column length.
    pub len: usize,
}

impl PatternColumn {
    pub fn view(&self) -> ColumnView<'_> {
        ColumnView {
            support: &self.support,
            values: self.values.as_deref(),
        }
    }

    pub fn entry(&self, i: usize) -> f64 {
        self.view().entry(i)
    }

    pub fn dot(&self, a: &[f64]) -> f64 {
        self.view().dot(a)
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (k, &i) in self.support.iter().enumerate() {
            out[i as usize] = self.values.as_ref().map_or(1.0, |v| v[k]);
        }
        out
    }
}

/// Borrowed sparse column.
#[derive(Debug, Clone, Copy)]
pub struct ColumnView<'a> {
    pub support: &'a [u32],
    pub values: Option<&'a [f64]>,
}

impl ColumnView<'_> {
    #[inline]
    pub fn value_at(&self, k: usize) -> f64 {
        self.values.map_or(1.0, |v| v[k])
    }

    pub fn entry(&self, i: usize) -> f64 {
        match self.support.binary_search(&(i as u32)) {
            Ok(k) => self.value_at(k),
            Err(_) => 0.0,
        }
    }

    #[inline]
    pub fn dot(&self, a: &[f64]) -> f64 {
        match self.values {
            None => self.support.iter().map(|&i| a[i as usize]).sum(),
            Some(v) => self
                .support
                .iter()
                .zip(v)
                .map(|(&i, &x)| x * a[i as usize])
                .sum(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        match self.values {
            None => self.support.len() as f64,
            Some(v) => v.iter().map(|x| x * x).sum(),
        }
    }

    /// Inner product with another sparse column (merge of sorted supports).
    pub fn dot_column(&self, other: &ColumnView<'_>) -> f64 {
        let (mut a, mut b) = (0usize, 0usize);
        let mut acc = 0.0;
        while a < self.support.len() && b < other.support.len() {
            match self.support[a].cmp(&other.support[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.value_at(a) * other.value_at(b);
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// `b = max(Σ_{a_i>0} |a_i| x_i, Σ_{a_i<0} |a_i| x_i)`.
    #[inline]
    pub fn bound(&self, a: &[f64]) -> f64 {
        let (pos, neg) = self.split_sums(a);
        f64::max(pos, neg)
    }

    /// Positive and negative parts of `xᵀa`: returns `(Σ_{a_i>0} |a_i| x_i,
    /// Σ_{a_i<0} |a_i| x_i)`, so `xᵀa = pos - neg`.
    #[inline]
    pub fn split_sums(&self, a: &[f64]) -> (f64, f64) {
        let (mut pos, mut neg) = (0.0, 0.0);
        match self.values {
            None => {
                for &i in self.support {
                    let t = a[i as usize];
                    if t > 0.0 {
                        pos += t;
                    } else {
                        neg -= t;
                    }
                }
            }
            Some(v) => {
                for (&i, &x) in self.support.iter().zip(v) {
                    let t = a[i as usize] * x;
                    if t > 0.0 {
                        pos += t;
                    } else {
                        neg -= t;
                    }
                }
            }
        }
        (pos, neg)
    }
}

/// Materializes the column of `pattern` from the original covariates.
pub fn materialize(pattern: &Pattern, z: &CovariateMatrix) -> Result<PatternColumn> {
    if let Some(&bad) = pattern.items().iter().find(|&&j| j as usize >= z.m()) {
        return Err(Error::InvalidPattern {
            items: pattern.items().to_vec(),
            reason: format!("index {bad} out of range for {} covariates", z.m()),
        });
    }
    let mut support = Vec::new();
    let mut values = Vec::new();
    for i in 0..z.rows() {
        let x: f64 = pattern
            .items()
            .iter()
            .map(|&j| z.get(i, j as usize))
            .product();
        if x != 0.0 {
            support.push(i as u32);
            values.push(x);
        }
    }
    Ok(PatternColumn {
        pattern: pattern.clone(),
        support,
        values: if z.is_binary() { None } else { Some(values) },
        len: z.rows(),
    })
}

/// Anti-monotone bounds `(b_w, b_v)` of a column against two row vectors.
/// Every descendant `ℓ' ⊃ ℓ` satisfies `|x_ℓ'ᵀw| ≤ b_w` and `|x_ℓ'ᵀv| ≤ b_v`.
pub fn bound_pair(column: &PatternColumn, w: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    for (name, len) in [("bound residual", w.len()), ("bound direction", v.len())] {
        if len != column.len {
            return Err(Error::Dimension {
                context: name,
                expected: column.len,
                got: len,
            });
        }
    }
    let view = column.view();
    Ok((view.bound(w), view.bound(v)))
}

/// What a tree walk should do after visiting a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visit {
    Descend,
    /// Skip the node's subtree.
    Prune,
    /// Abort the whole walk.
    Stop,
}

/// A node handed to a tree-walk visitor.
#[derive(Debug, Clone, Copy)]
pub struct Node<'a> {
    pub items: &'a [u32],
    pub column: ColumnView<'a>,
}

/// Outcome of a tree walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkStats {
    pub visited: u64,
    pub completed: bool,
}

/// Depth-first pre-order walk over all patterns of order `<= max_order`
/// (unbounded when `None`). Nodes come in lexicographic order of their item
/// lists.
pub fn walk<F>(z: &CovariateMatrix, max_order: Option<usize>, mut visit: F) -> WalkStats
where
    F: FnMut(Node<'_>) -> Visit,
{
    let depth_cap = max_order.unwrap_or(usize::MAX).min(z.m());
    let mut walker = Walker {
        z,
        depth_cap,
        visit: &mut visit,
        items: Vec::with_capacity(depth_cap.min(64)),
        visited: 0,
        stopped: false,
    };
    if depth_cap > 0 {
        let all: Vec<u32> = (0..z.rows() as u32).collect();
        walker.expand(&all, None);
    }
    WalkStats {
        visited: walker.visited,
        completed: !walker.stopped,
    }
}

struct Walker<'a, F> {
    z: &'a CovariateMatrix,
    depth_cap: usize,
    visit: &'a mut F,
    items: Vec<u32>,
    visited: u64,
    stopped: bool,
}

impl<F> Walker<'_, F>
where
    F: FnMut(Node<'_>) -> Visit,
{
    fn expand(&mut self, support: &[u32], values: Option<&[f64]>) {
        let start = self.items.last().map_or(0, |&j| j as usize + 1);
        let binary = self.z.is_binary();
        for j in start..self.z.m() {
            let col = self.z.column(j);
            let mut child_support = Vec::with_capacity(support.len());
            let mut child_values = Vec::new();
            if binary {
                child_support.extend(support.iter().copied().filter(|&i| col[i as usize] != 0.0));
            } else {
                for (k, &i) in support.iter().enumerate() {
                    let x = col[i as usize] * values.map_or(1.0, |v| v[k]);
                    if x != 0.0 {
                        child_support.push(i);
                        child_values.push(x);
                    }
                }
            }
            let child_values = (!binary).then_some(child_values);

            self.items.push(j as u32);
            self.visited += 1;
            let action = (self.visit)(Node {
                items: &self.items,
                column: ColumnView {
                    support: &child_support,
                    values: child_values.as_deref(),
                },
            });
            match action {
                Visit::Stop => self.stopped = true,
                Visit::Prune => {}
                Visit::Descend => {
                    if self.items.len() < self.depth_cap {
                        self.expand(&child_support, child_values.as_deref());
                    }
                }
            }
            self.items.pop();
            if self.stopped {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(rows: &[&[u8]]) -> CovariateMatrix {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect();
        CovariateMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn singleton_column_is_original() {
        let z = bin(&[&[1], &[0], &[1], &[1]]);
        let col = materialize(&Pattern::singleton(0), &z).unwrap();
        assert_eq!(col.dense(), vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(col.support, vec![0, 2, 3]);
    }

    #[test]
    fn pair_column_is_elementwise_and() {
        let z = bin(&[&[1, 1], &[0, 1], &[1, 0]]);
        let p = Pattern::new(vec![0, 1], 2).unwrap();
        assert_eq!(materialize(&p, &z).unwrap().dense(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_patterns_rejected() {
        assert!(Pattern::new(vec![], 3).is_err());
        assert!(Pattern::new(vec![3], 3).is_err());
        assert!(Pattern::new(vec![1, 1], 3).is_err());
        let z = bin(&[&[1, 1]]);
        let p = Pattern::new(vec![0, 4], 5).unwrap();
        assert!(matches!(materialize(&p, &z), Err(Error::InvalidPattern { .. })));
    }

    #[test]
    fn canonical_children() {
        let p = Pattern::singleton(1);
        let kids = children(&p, 4);
        let items: Vec<&[u32]> = kids.iter().map(|k| k.items()).collect();
        assert_eq!(items, vec![&[1, 2][..], &[1, 3][..]]);
        assert!(children(&Pattern::singleton(3), 4).is_empty());
        assert_eq!(root_children(3).len(), 3);
    }

    #[test]
    fn full_tree_has_all_subsets() {
        let z = bin(&[&[1, 1, 1]]);
        let mut seen = Vec::new();
        let stats = walk(&z, None, |node| {
            seen.push(node.items.to_vec());
            Visit::Descend
        });
        assert_eq!(stats.visited, 7);
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(seen, sorted, "pre-order walk is lexicographic");
        assert_eq!(pattern_count(3, 3), 7);
    }

    #[test]
    fn pattern_counts_match_binomial_sums() {
        assert_eq!(pattern_count(4, 2), 10);
        assert_eq!(pattern_count(5, 5), 31);
        assert_eq!(pattern_count(30, 5), 174_436);
        assert_eq!(pattern_count(30, 25), 1_073_709_892);
    }

    #[test]
    fn bound_two_row_case() {
        let z = bin(&[&[1], &[1]]);
        let col = materialize(&Pattern::singleton(0), &z).unwrap();
        let (bw, bv) = bound_pair(&col, &[3.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(bw, 3.0);
        assert_eq!(bv, 0.0);
        assert!(col.dot(&[3.0, -1.0]).abs() <= bw);
        assert!(matches!(
            bound_pair(&col, &[1.0], &[0.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn walk_respects_order_cap_and_pruning() {
        let z = bin(&[&[1, 1, 1, 1]]);
        let stats = walk(&z, Some(2), |_| Visit::Descend);
        assert_eq!(stats.visited as u128, pattern_count(4, 2));
        // prune everything below singletons
        let stats = walk(&z, None, |_| Visit::Prune);
        assert_eq!(stats.visited, 4);
        let stats = walk(&z, None, |node| {
            if node.items == [0, 1] {
                Visit::Stop
            } else {
                Visit::Descend
            }
        });
        assert!(!stats.completed);
        assert_eq!(stats.visited, 2);
    }

    #[test]
    fn unit_interval_columns_multiply() {
        let z = CovariateMatrix::from_unit_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let p = Pattern::new(vec![0, 1], 2).unwrap();
        let col = materialize(&p, &z).unwrap();
        assert_eq!(col.dense(), vec![0.25, 0.0]);
        let mut walked = Vec::new();
        walk(&z, None, |node| {
            walked.push((node.items.to_vec(), node.column.dot(&[1.0, 1.0])));
            Visit::Descend
        });
        assert_eq!(walked[1], (vec![0, 1], 0.25));
        assert!(CovariateMatrix::from_rows(&[vec![0.5]]).is_err());
    }
}
