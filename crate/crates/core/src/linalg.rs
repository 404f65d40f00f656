//! Dense linear-algebra helpers shared by the smoother, fixed-point and
//! additive modules.

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest block handled by a dense eigenvalue computation; larger blocks go
/// through power iteration.
pub const DENSE_EIGEN_LIMIT: usize = 200;
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 10_000;

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Solves `a x = b` with a partially pivoted LU factorization.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let lu = a.clone().lu();
    check_lu_conditioning(&lu, what)?;
    lu.solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    check_lu_conditioning(&lu, what)?;
    lu.solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}

pub(crate) fn check_lu_conditioning(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    what: &str,
) -> Result<()> {
    let u = lu.u();
    let n = u.nrows().min(u.ncols());
    if n == 0 {
        return Ok(());
    }
    let mut max_pivot = 0.0_f64;
    let mut min_pivot = f64::INFINITY;
    for i in 0..n {
        let p = u[(i, i)].abs();
        max_pivot = max_pivot.max(p);
        min_pivot = min_pivot.min(p);
    }
    if !(min_pivot > max_pivot * 1e-13) || !min_pivot.is_finite() {
        return Err(Error::Singular(what.to_string()));
    }
    Ok(())
}

/// `I - m` for a square matrix.
pub fn identity_minus(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::identity(n, n) - m
}

/// Spectral radius of a square matrix. Dense eigenvalues up to
/// [`DENSE_EIGEN_LIMIT`], power iteration above it.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    if n <= DENSE_EIGEN_LIMIT {
        if let Some(r) = dense_spectral_radius(m) {
            return r;
        }
    }
    power_spectral_radius(m, POWER_TOL, POWER_MAX_ITER)
}

pub fn dense_spectral_radius(m: &DMatrix<f64>) -> Option<f64> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100 * m.nrows().max(10))?;
    let eig = schur.complex_eigenvalues();
    Some(eig.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Power iteration with per-step renormalization. The radius estimate is the
/// geometric mean of the growth factors over a trailing window, which also
/// settles for complex-conjugate dominant pairs where the per-step ratio
/// oscillates. A vector annihilated by the matrix triggers a random restart.
pub fn power_spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    const WINDOW: usize = 32;
    let n = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5a_u64);
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 1e-3 * ((i * 7919) % 13) as f64);
    x /= x.norm();
    let mut logs: Vec<f64> = Vec::with_capacity(max_iter.min(4096));
    let mut prev_est = f64::NAN;
    let mut restarts = 0;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let y = m * &x;
        let nrm = y.norm();
        if !(nrm > 1e-300) {
            if restarts >= 3 {
                return 0.0;
            }
            restarts += 1;
            x = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
            x /= x.norm();
            logs.clear();
            prev_est = f64::NAN;
            continue;
        }
        x = y / nrm;
        logs.push(nrm.ln());
        if logs.len() >= 2 * WINDOW && logs.len() % WINDOW == 0 {
            let w = &logs[logs.len() - WINDOW..];
            let est = (w.iter().sum::<f64>() / WINDOW as f64).exp();
            let step = *logs.last().unwrap();
            let single = step.exp();
            // real dominant eigenvalue: single-step ratio has settled
            if (single - est).abs() <= tol * est.max(1.0) {
                return single;
            }
            if (est - prev_est).abs() <= tol * est.max(1.0) {
                return est;
            }
            prev_est = est;
        }
    }
    let w = WINDOW.min(logs.len()).max(1);
    if logs.is_empty() {
        return 0.0;
    }
    (logs[logs.len() - w..].iter().sum::<f64>() / w as f64).exp()
}

pub fn mean(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.sum() / v.len() as f64
    }
}

/// Subtracts the mean in place, returning the removed mean.
pub fn center_in_place(v: &mut DVector<f64>) -> f64 {
    let m = mean(v);
    v.add_scalar_mut(-m);
    m
}

/// `C m` with `C = I - 11'/n` (column-wise centering).
pub fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mu = col.sum() / col.len().max(1) as f64;
        col.add_scalar_mut(-mu);
    }
    out
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn inf_norm_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_power_agree_on_nonnegative() {
        let m = DMatrix::from_row_slice(3, 3, &[0.1, 0.5, 0.2, 0.3, 0.0, 0.4, 0.2, 0.2, 0.3]);
        let d = dense_spectral_radius(&m).unwrap();
        let p = power_spectral_radius(&m, 1e-12, 10_000);
        assert!((d - p).abs() < 1e-8, "{d} vs {p}");
    }

    #[test]
    fn power_handles_complex_pair() {
        // rotation scaled by 0.8: eigenvalues 0.8 e^{±iθ}
        let (c, s) = (0.8 * 0.3_f64.cos(), 0.8 * 0.3_f64.sin());
        let m = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let p = power_spectral_radius(&m, 1e-10, 10_000);
        assert!((p - 0.8).abs() < 1e-6, "{p}");
    }

    #[test]
    fn nilpotent_has_zero_radius() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(power_spectral_radius(&m, 1e-10, 1000) < 1e-6);
        assert_eq!(dense_spectral_radius(&m).unwrap(), 0.0);
    }

    #[test]
    fn centering_rows_zeroes_column_means() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        let c = center_rows(&m);
        assert!(c.column_iter().all(|col| col.sum().abs() < 1e-15));
    }
}
