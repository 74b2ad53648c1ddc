use thiserror::Error;

use crate::patterns::Pattern;
use crate::solver::ModelState;
use crate::taupath::TauPath;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pattern {items:?}: {reason}")]
    InvalidPattern { items: Vec<u32>, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The active Gram matrix is (numerically) rank deficient. Carries the
    /// patterns that form the linear dependency.
    #[error("singular active Gram matrix; colliding patterns: {}", format_patterns(.patterns))]
    Singular { patterns: Vec<Pattern> },

    #[error("solver did not converge within {iterations} iterations")]
    IterationLimit {
        iterations: usize,
        state: Box<ModelState>,
    },

    #[error("{what} budget exceeded after {kinks} kinks")]
    Budget {
        what: BudgetKind,
        kinks: usize,
        partial: Box<TauPath>,
    },

    #[error("expansion has {p} columns, more than the cap of {cap}")]
    Size { p: u128, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    Kinks,
    Nodes,
    WallClock,
}

impl std::fmt::Display for BudgetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BudgetKind::Kinks => "kink",
            BudgetKind::Nodes => "node",
            BudgetKind::WallClock => "wall-clock",
        })
    }
}

fn format_patterns(patterns: &[Pattern]) -> String {
    patterns
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
