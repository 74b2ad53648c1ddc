#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shim_conformal::oracle::DenseExpansion;
use shim_conformal::patterns::CovariateMatrix;
use shim_conformal::taupath::TauPath;

/// Random labeled rows plus a test row (last), with responses for the
/// labeled rows.
#[derive(Debug, Clone)]
pub struct Instance {
    pub z: CovariateMatrix,
    pub y: Vec<f64>,
    pub seed: u64,
}

pub fn instance(seed: u64, n: usize, m: usize, density: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..=n)
        .map(|_| (0..m).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect())
        .collect();
    let y = (0..n)
        .map(|i| {
            let r = &rows[i];
            2.0 * r[0] + 1.5 * r[0] * r[1] - r[m - 1] + rng.random_range(-1.5..1.5)
        })
        .collect();
    Instance {
        z: CovariateMatrix::from_rows(&rows).unwrap(),
        y,
        seed,
    }
}

/// Full coefficient vector over the expansion's columns at `tau`.
pub fn path_beta(path: &TauPath, exp: &DenseExpansion, tau: f64) -> Vec<f64> {
    let mut beta = vec![0.0; exp.len()];
    for (p, b) in path.coefficients_at(tau) {
        let j = exp.index_of(&p).expect("active pattern within the expansion");
        beta[j] = b;
    }
    beta
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Kink taus plus every segment midpoint.
pub fn probe_points(path: &TauPath) -> Vec<f64> {
    let mut out = Vec::new();
    for w in path.kinks.windows(2) {
        out.push(w[0].tau);
        out.push(0.5 * (w[0].tau + w[1].tau));
    }
    out.push(path.kinks.last().unwrap().tau);
    out
}
