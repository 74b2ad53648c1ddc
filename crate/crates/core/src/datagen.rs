//! Synthetic data, CSV ingestion with a small binarizer, and λ selection by
//! k-fold cross-validation.
//!
//! Random draws use `ChaCha8Rng::seed_from_u64(seed)`: first the `n × m`
//! design entries row by row, each `Bernoulli(1 − ζ)`, then one standard
//! normal per row for the noise.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::{CovariateMatrix, Pattern};
use crate::solver::{fit, max_abs_correlation, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    /// Probability that a design entry is zero.
    pub zeta: f64,
    pub true_terms: Vec<(Pattern, f64)>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `2z₁ + 2z₁z₂ + 2z₁z₂z₃ + 2z₁z₃z₄z₅ + 2z₁z₂z₃z₄z₅` with unit noise.
    pub fn planted(n: usize, m: usize, zeta: f64, seed: u64) -> Self {
        let terms = [&[0u32][..], &[0, 1], &[0, 1, 2], &[0, 2, 3, 4], &[0, 1, 2, 3, 4]]
            .iter()
            .map(|items| (Pattern::from_sorted(items), 2.0))
            .collect();
        Self {
            n,
            m,
            zeta,
            true_terms: terms,
            noise_sigma: 1.0,
            seed,
        }
    }

    /// `c·z₁ + c·z₁z₂ + c·z₁z₂z₃`.
    pub fn three_term(n: usize, m: usize, zeta: f64, coef: f64, seed: u64) -> Self {
        let terms = [&[0u32][..], &[0, 1], &[0, 1, 2]]
            .iter()
            .map(|items| (Pattern::from_sorted(items), coef))
            .collect();
        Self {
            n,
            m,
            zeta,
            true_terms: terms,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta must be in [0, 1], got {}", self.zeta)));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config(format!("noise sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("n and m must be positive".into()));
        }
        for (p, _) in &self.true_terms {
            Pattern::new(p.items().to_vec(), self.m)?;
        }
        Ok(())
    }

    /// Noise-free mean response of a covariate row.
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.true_terms
            .iter()
            .map(|(p, c)| c * p.items().iter().map(|&j| x[j as usize]).product::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub z: CovariateMatrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub response_name: String,
    /// Generator spec or source file and rules.
    pub provenance: String,
}

impl Dataset {
    pub fn new(z: CovariateMatrix, y: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        if z.rows() != y.len() {
            return Err(Error::Dimension {
                context: "dataset responses",
                expected: z.rows(),
                got: y.len(),
            });
        }
        if feature_names.len() != z.m() {
            return Err(Error::Dimension {
                context: "feature names",
                expected: z.m(),
                got: feature_names.len(),
            });
        }
        let unique: HashSet<&String> = feature_names.iter().collect();
        if unique.len() != feature_names.len() {
            return Err(Error::Data("feature names are not unique".into()));
        }
        Ok(Self {
            z,
            y,
            feature_names,
            response_name: "y".into(),
            provenance: String::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// Rows `idx` in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            z: self.z.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            response_name: self.response_name.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// First `k` rows and the rest.
    pub fn split_at(&self, k: usize) -> Result<(Self, Self)> {
        let k = k.min(self.rows());
        let a: Vec<usize> = (0..k).collect();
        let b: Vec<usize> = (k..self.rows()).collect();
        Ok((self.select(&a)?, self.select(&b)?))
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p_one = 1.0 - spec.zeta;
    let rows: Vec<Vec<f64>> = (0..spec.n)
        .map(|_| {
            (0..spec.m)
                .map(|_| if rng.random_bool(p_one) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|x| {
            let e: f64 = rng.sample(StandardNormal);
            spec.mean(x) + spec.noise_sigma * e
        })
        .collect();
    let z = CovariateMatrix::from_rows(&rows)?;
    let names = (1..=spec.m).map(|j| format!("z{j}")).collect();
    let mut ds = Dataset::new(z, y, names)?;
    ds.provenance = format!(
        "synthetic n={} m={} zeta={} sigma={} seed={}",
        spec.n, spec.m, spec.zeta, spec.noise_sigma, spec.seed
    );
    Ok(ds)
}

/// How one CSV column becomes binary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnRule {
    /// Already 0/1.
    Binary {
        name: String,
        #[serde(default)]
        feature: Option<String>,
    },
    /// Numeric column mapped to one indicator per bin. Bins are written as
    /// `=k`, `>k`, `>=k`, `<k`, `<=k` or `a-b` (inclusive).
    Bins {
        name: String,
        #[serde(default)]
        feature: Option<String>,
        bins: Vec<String>,
    },
    /// Categorical column mapped to one indicator per level; all observed
    /// levels in sorted order when `levels` is absent.
    Onehot {
        name: String,
        #[serde(default)]
        feature: Option<String>,
        #[serde(default)]
        levels: Option<Vec<String>>,
    },
}

impl ColumnRule {
    fn name(&self) -> &str {
        match self {
            ColumnRule::Binary { name, .. } | ColumnRule::Bins { name, .. } | ColumnRule::Onehot { name, .. } => name,
        }
    }

    fn prefix(&self) -> &str {
        match self {
            ColumnRule::Binary { feature, .. }
            | ColumnRule::Bins { feature, .. }
            | ColumnRule::Onehot { feature, .. } => feature.as_deref().unwrap_or(self.name()),
        }
    }
}

/// CSV layout: the response column and the rules for the covariates. An
/// empty rule list means every other column is binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: String,
    #[serde(default, rename = "column")]
    pub columns: Vec<ColumnRule>,
}

impl Schema {
    pub fn binary(response: &str) -> Self {
        Self {
            response: response.into(),
            columns: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bin {
    Eq(f64),
    Gt(f64),
    Ge(f64),
    Lt(f64),
    Le(f64),
    Range(f64, f64),
}

impl Bin {
    fn parse(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad bin bound in {s:?}")))
        };
        let s = s.trim();
        if let Some(r) = s.strip_prefix(">=") {
            Ok(Bin::Ge(num(r)?))
        } else if let Some(r) = s.strip_prefix("<=") {
            Ok(Bin::Le(num(r)?))
        } else if let Some(r) = s.strip_prefix('>') {
            Ok(Bin::Gt(num(r)?))
        } else if let Some(r) = s.strip_prefix('<') {
            Ok(Bin::Lt(num(r)?))
        } else if let Some(r) = s.strip_prefix('=') {
            Ok(Bin::Eq(num(r)?))
        } else if let Some((a, b)) = s.split_once('-').filter(|(a, _)| !a.is_empty()) {
            Ok(Bin::Range(num(a)?, num(b)?))
        } else {
            Ok(Bin::Eq(num(s)?))
        }
    }

    fn contains(self, x: f64) -> bool {
        match self {
            Bin::Eq(a) => x == a,
            Bin::Gt(a) => x > a,
            Bin::Ge(a) => x >= a,
            Bin::Lt(a) => x < a,
            Bin::Le(a) => x <= a,
            Bin::Range(a, b) => a <= x && x <= b,
        }
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv(file, schema)?;
    ds.provenance = format!("{} (response {:?}, {} rules)", path.display(), schema.response, schema.columns.len());
    Ok(ds)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let col_index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column {name:?} not found")))
    };
    let cell = |row: usize, col: usize| -> Result<&str> {
        let v = records[row].get(col).unwrap_or("").trim();
        if v.is_empty() {
            Err(Error::Data(format!("missing value at row {}, column {:?}", row + 1, header[col])))
        } else {
            Ok(v)
        }
    };
    let numeric = |row: usize, col: usize| -> Result<f64> {
        let v = cell(row, col)?;
        v.parse::<f64>().map_err(|_| {
            Error::Data(format!("non-numeric value {v:?} at row {}, column {:?}", row + 1, header[col]))
        })
    };

    let y_col = col_index(&schema.response)?;
    let y = (0..records.len()).map(|r| numeric(r, y_col)).collect::<Result<Vec<_>>>()?;

    let rules: Vec<ColumnRule> = if schema.columns.is_empty() {
        header
            .iter()
            .filter(|h| **h != schema.response)
            .map(|h| ColumnRule::Binary {
                name: h.clone(),
                feature: None,
            })
            .collect()
    } else {
        schema.columns.clone()
    };

    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for rule in &rules {
        let c = col_index(rule.name())?;
        match rule {
            ColumnRule::Binary { feature, .. } => {
                let mut out = Vec::with_capacity(records.len());
                for r in 0..records.len() {
                    let x = numeric(r, c)?;
                    if x != 0.0 && x != 1.0 {
                        return Err(Error::Data(format!(
                            "non-binary value {x} at row {}, column {:?} has no rule",
                            r + 1,
                            header[c]
                        )));
                    }
                    out.push(x);
                }
                names.push(feature.clone().unwrap_or_else(|| header[c].clone()));
                columns.push(out);
            }
            ColumnRule::Bins { bins, .. } => {
                let parsed = bins.iter().map(|b| Bin::parse(b)).collect::<Result<Vec<_>>>()?;
                let values = (0..records.len()).map(|r| numeric(r, c)).collect::<Result<Vec<_>>>()?;
                for (label, bin) in bins.iter().zip(parsed) {
                    names.push(format!("{}:{}", rule.prefix(), label.trim()));
                    columns.push(values.iter().map(|&x| f64::from(u8::from(bin.contains(x)))).collect());
                }
            }
            ColumnRule::Onehot { levels, .. } => {
                let values = (0..records.len()).map(|r| cell(r, c)).collect::<Result<Vec<_>>>()?;
                let levels: Vec<String> = match levels {
                    Some(l) => l.clone(),
                    None => values
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                for level in levels {
                    columns.push(values.iter().map(|&v| f64::from(u8::from(v == level))).collect());
                    names.push(format!("{}:{}", rule.prefix(), level));
                }
            }
        }
    }

    let n = records.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|r| columns.iter().map(|col| col[r]).collect()).collect();
    if n == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let z = CovariateMatrix::from_rows(&rows)?;
    let mut ds = Dataset::new(z, y, names)?;
    ds.response_name = schema.response.clone();
    Ok(ds)
}

/// Writes the features as 0/1 and the response last, with a header row.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = ds.feature_names.clone();
    header.push(ds.response_name.clone());
    w.write_record(&header)?;
    for i in 0..ds.rows() {
        let mut rec: Vec<String> = (0..ds.z.m()).map(|j| format_value(ds.z.get(i, j))).collect();
        rec.push(format_value(ds.y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}

fn format_value(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// `max_ℓ |x_ℓᵀy|` and the pattern attaining it.
pub fn lambda_max(z: &CovariateMatrix, y: &[f64], max_order: Option<usize>) -> (Option<Pattern>, f64) {
    let (best, _) = max_abs_correlation(z, y, max_order, true, 0.0, |_| true);
    match best {
        Some((p, v)) => (Some(p), v),
        None => (None, 0.0),
    }
}

/// `count` log-spaced values from `λ_max/10` down to `λ_max/1000`.
pub fn lambda_grid(lambda_max: f64, count: usize) -> Vec<f64> {
    let hi = lambda_max / 10.0;
    let lo = lambda_max / 1000.0;
    if count <= 1 {
        return vec![hi];
    }
    (0..count)
        .map(|k| hi * (lo / hi).powf(k as f64 / (count - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub lambda: f64,
    pub fold: usize,
    /// `None` when the fit failed.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub mean_mse: Vec<Option<f64>>,
    pub cells: Vec<CvCell>,
}

/// Seeded fold label for every row.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

/// Seeded shuffle split into `(train, calibration)` index sets, with
/// `round(n·train_fraction)` training rows.
pub fn train_calibration_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * train_fraction).round() as usize;
    let cal = idx.split_off(k.min(n));
    (idx, cal)
}

/// k-fold cross-validated λ over `grid` (default [`lambda_grid`] with 10
/// points). The first grid value with the smallest mean fold error wins.
pub fn select_lambda(
    ds: &Dataset,
    folds: usize,
    template: &FitConfig,
    grid: Option<&[f64]>,
    seed: u64,
) -> Result<CvResult> {
    if folds < 2 || folds > ds.rows() {
        return Err(Error::Config(format!("need 2 ≤ folds ≤ {}, got {folds}", ds.rows())));
    }
    let grid: Vec<f64> = match grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        Some(_) => return Err(Error::Config("empty λ grid".into())),
        None => lambda_grid(lambda_max(&ds.z, &ds.y, template.max_order).1, 10),
    };
    let labels = fold_assignment(ds.rows(), folds, seed);
    let splits: Vec<(Dataset, Dataset)> = (0..folds)
        .map(|f| {
            let train: Vec<usize> = (0..ds.rows()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..ds.rows()).filter(|&i| labels[i] == f).collect();
            Ok((ds.select(&train)?, ds.select(&test)?))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let cells: Vec<CvCell> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let mut cfg = template.clone();
            cfg.lambda = grid[g];
            let (train, test) = &splits[f];
            let mse = fit(&train.z, &train.y, &cfg).ok().map(|state| {
                (0..test.rows())
                    .map(|i| (test.y[i] - state.predict(&test.z.row(i))).powi(2))
                    .sum::<f64>()
                    / test.rows() as f64
            });
            CvCell {
                lambda: grid[g],
                fold: f,
                mse,
            }
        })
        .collect();

    let mean_mse: Vec<Option<f64>> = (0..grid.len())
        .map(|g| {
            let ok: Vec<f64> = cells[g * folds..(g + 1) * folds].iter().filter_map(|c| c.mse).collect();
            (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (g, m) in mean_mse.iter().enumerate() {
        if let Some(m) = *m {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((g, m));
            }
        }
    }
    let (g, _) = best.ok_or_else(|| Error::Numeric("every cross-validation fit failed".into()))?;
    Ok(CvResult {
        lambda: grid[g],
        grid,
        mean_mse,
        cells,
    })
}
