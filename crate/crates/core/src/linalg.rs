//! Small dense linear solver for the tabular oracles. Gaussian elimination
//! with partial pivoting is plenty at n <= a few dozen states.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solve `a x = b` for square `a` (row-major, n x n). Consumes copies.
pub fn solve<F: Scalar>(a: &[F], b: &[F], n: usize) -> Result<Vec<F>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();

    for col in 0..n {
        // partial pivot
        let mut pivot = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if m[pivot * n + col].abs() < F::from_f64_c(1e-300) {
            return Err(Error::Domain("singular linear system".into()));
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            x.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / diag;
            if factor == F::zero() {
                continue;
            }
            for c in col..n {
                let v = m[col * n + c];
                m[r * n + c] = m[r * n + c] - factor * v;
            }
            x[r] = x[r] - factor * x[col];
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let mut acc = x[col];
        for c in col + 1..n {
            acc = acc - m[col * n + c] * x[c];
        }
        x[col] = acc / m[col * n + col];
    }
    Ok(x)
}

/// Max-abs residual of `a x - b`.
pub fn residual<F: Scalar>(a: &[F], x: &[F], b: &[F], n: usize) -> F {
    let mut worst = F::zero();
    for r in 0..n {
        let mut acc = F::zero();
        for c in 0..n {
            acc += a[r * n + c] * x[c];
        }
        worst = worst.max((acc - b[r]).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [2 1; 1 3] x = [5; 10] -> x = [1; 3]
        let a = vec![2.0f64, 1.0, 1.0, 3.0];
        let b = vec![5.0, 10.0];
        let x = solve(&a, &b, 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        assert!(residual(&a, &x, &b, 2) < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let a = vec![1.0f64, 2.0, 2.0, 4.0];
        assert!(solve(&a, &[1.0, 2.0], 2).is_err());
    }
}
