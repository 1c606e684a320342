//! Small dense linear algebra for state dimensions d <= 3.

use crate::error::{Error, Result};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a row-major orthogonal matrix whose columns are
/// the eigenvectors. Intended for tiny matrices (diffusion coefficients).
pub fn sym_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q].abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, v)
}

/// Matrix square root of `2 * Q` for a symmetric positive definite `Q`.
pub fn sqrt_two_q(q: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = sym_eigen(q, d);
    let mut out = vec![0.0; d * d];
    for (idx, lam) in eig.iter().enumerate() {
        if *lam <= 0.0 {
            return Err(Error::Numerical(format!(
                "diffusion matrix is not positive definite (eigenvalue {lam:.3e})"
            )));
        }
        let s = (2.0 * lam).sqrt();
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] += s * v[r * d + idx] * v[c * d + idx];
            }
        }
    }
    Ok(out)
}

/// Solve `A x = b` in place by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], d: usize) -> Result<()> {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d);
    for col in 0..d {
        let mut piv = col;
        for r in (col + 1)..d {
            if a[r * d + col].abs() > a[piv * d + col].abs() {
                piv = r;
            }
        }
        if a[piv * d + col].abs() < 1e-300 {
            return Err(Error::Numerical("singular matrix in small dense solve".into()));
        }
        if piv != col {
            for c in 0..d {
                a.swap(col * d + c, piv * d + c);
            }
            b.swap(col, piv);
        }
        let diag = a[col * d + col];
        for r in (col + 1)..d {
            let f = a[r * d + col] / diag;
            if f == 0.0 {
                continue;
            }
            for c in col..d {
                a[r * d + c] -= f * a[col * d + c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..d).rev() {
        let mut s = b[col];
        for c in (col + 1)..d {
            s -= a[col * d + c] * b[c];
        }
        b[col] = s / a[col * d + col];
    }
    Ok(())
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal() {
        let (mut eig, _) = sym_eigen(&[2.0, 0.0, 0.0, 1.0], 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_two_q_squares_back() {
        // Q symmetric positive definite, 3x3.
        let q = [2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0];
        let s = sqrt_two_q(&q, 3).unwrap();
        // s * s should equal 2q.
        for r in 0..3 {
            for c in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += s[r * 3 + k] * s[k * 3 + c];
                }
                assert!((v - 2.0 * q[r * 3 + c]).abs() < 1e-10, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn dense_solve_roundtrip() {
        let a = [3.0, 1.0, -1.0, 2.0, 4.0, 1.0, -1.0, 2.0, 5.0];
        let x_true = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        for r in 0..3 {
            b[r] = (0..3).map(|c| a[r * 3 + c] * x_true[c]).sum();
        }
        let mut a_mut = a;
        solve_dense(&mut a_mut, &mut b, 3).unwrap();
        for i in 0..3 {
            assert!((b[i] - x_true[i]).abs() < 1e-12);
        }
    }
}
