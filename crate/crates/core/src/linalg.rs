//! Dense Cholesky for the small active-set Gram systems.

/// Relative pivot threshold below which a Gram matrix is treated as singular.
const PIVOT_RTOL: f64 = 1e-10;

/// Lower-triangular factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    l: Vec<f64>,
    k: usize,
}

/// Factors the row-major `k × k` matrix `a`. On failure returns the index of
/// the first pivot that is not safely positive.
pub(crate) fn cholesky(a: &[f64], k: usize) -> Result<Cholesky, usize> {
    debug_assert_eq!(a.len(), k * k);
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if !(d > PIVOT_RTOL * a[j * k + j].abs().max(f64::MIN_POSITIVE)) {
            return Err(j);
        }
        let d = d.sqrt();
        l[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / d;
        }
    }
    Ok(Cholesky { l, k })
}

impl Cholesky {
    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut y = b.to_vec();
        for i in 0..k {
            for p in 0..i {
                y[i] -= self.l[i * k + p] * y[p];
            }
            y[i] /= self.l[i * k + i];
        }
        for i in (0..k).rev() {
            for p in i + 1..k {
                y[i] -= self.l[p * k + i] * y[p];
            }
            y[i] /= self.l[i * k + i];
        }
        y
    }
}

/// Given that pivot `j` of `a` failed, returns `δ` with `δ_j = 1` and
/// `Gδ ≈ 0`, supported on indices `≤ j`.
pub(crate) fn null_direction(a: &[f64], k: usize, j: usize) -> Vec<f64> {
    let lead: Vec<f64> = (0..j)
        .flat_map(|r| (0..j).map(move |c| (r, c)))
        .map(|(r, c)| a[r * k + c])
        .collect();
    let rhs: Vec<f64> = (0..j).map(|r| a[r * k + j]).collect();
    let mut out = vec![0.0; k];
    if let Ok(ch) = cholesky(&lead, j) {
        for (o, c) in out.iter_mut().zip(ch.solve(&rhs)) {
            *o = -c;
        }
    }
    out[j] = 1.0;
    out
}

/// Given that pivot `j` of `a` failed, returns the earlier indices whose
/// columns combine to (approximately) reproduce column `j`.
pub(crate) fn dependent_set(a: &[f64], k: usize, j: usize) -> Vec<usize> {
    null_direction(a, k, j)
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > 1e-6)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let ch = cholesky(&a, 2).unwrap();
        let x = ch.solve(&[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn detects_duplicate_columns() {
        // columns c0, c1 = c0, c2 independent
        let a = [2.0, 2.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 3.0];
        assert_eq!(cholesky(&a, 3).unwrap_err(), 1);
        assert_eq!(dependent_set(&a, 3, 1), vec![0, 1]);
        let d = null_direction(&a, 3, 1);
        assert!((d[0] + 1.0).abs() < 1e-12 && d[1] == 1.0 && d[2] == 0.0);
    }
}
