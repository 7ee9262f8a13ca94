//! Small dense linear-algebra routines: Cholesky factorization and
//! triangular solves for symmetric positive-definite systems.

use crate::error::{Error, Result};

/// Cholesky factorization A = L·Lᵀ of a symmetric positive-definite matrix.
///
/// `a` is n×n row-major; returns the lower factor L (strictly upper part zero).
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::numeric(format!(
                "cholesky: matrix not positive definite at pivot {j} (value {diag})"
            )));
        }
        let dj = diag.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    Ok(l)
}

/// Solves A·X = B given the Cholesky factor L of A (A = L·Lᵀ).
///
/// `b` is n×m row-major; the solution X (n×m) is returned.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    let mut x = b.to_vec();
    // Forward: L·Y = B
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= lik * x[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    // Backward: Lᵀ·X = Y
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                for c in 0..m {
                    x[i * m + c] -= lki * x[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        for c in 0..m {
            x[i * m + c] /= d;
        }
    }
    x
}

/// Solves the SPD system A·X = B directly (factorize + solve).
pub fn spd_solve(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    Ok(cholesky_solve(&l, n, b, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        // A = [[4,2],[2,3]], b = [4, 5] -> x = [0.25, 1.5]
        let a = [4.0, 2.0, 2.0, 3.0];
        let b = [4.0, 5.0];
        let x = spd_solve(&a, 2, &b, 1).unwrap();
        assert!((x[0] - 0.25).abs() < 1e-12);
        assert!((x[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(cholesky(&a, 2).is_err());
    }
}
