use crate::error::{MasqError, Result};
use crate::numerics::Matrix;

/// Absolute asymmetry tolerated by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(P, λ)` with eigenvalues in descending order and eigenvectors as
/// the columns of `P`, so that `a ≈ P · diag(λ) · Pᵀ`. The input is
/// symmetrized as `(a + aᵀ)/2` after the tolerance check.
pub fn sym_eig(a: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(MasqError::dims(
            "sym_eig",
            format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
        ));
    }
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL {
        return Err(MasqError::NotSymmetric { max_asym });
    }

    let mut m: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            0.5 * (a[(i, j)] + a[(j, i)])
        })
        .collect();
    // Eigenvectors accumulate as rows of `v` (transposed at the end) so that
    // each rotation touches two contiguous rows.
    let mut v = Matrix::identity(n).into_data();

    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .map(|(i, j)| m[i * n + j] * m[i * n + j])
                .sum();
            if off.sqrt() <= 1e-16 * scale {
                break;
            }
            let mut rotated = false;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[p * n + q];
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    rotated = true;
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    rotate_sym(&mut m, n, p, q, c, s);
                    for k in 0..n {
                        let vp = v[p * n + k];
                        let vq = v[q * n + k];
                        v[p * n + k] = c * vp - s * vq;
                        v[q * n + k] = s * vp + c * vq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]).then(x.cmp(&y)));
    let eigvals: Vec<f64> = order.iter().map(|&k| m[k * n + k]).collect();
    let vecs = Matrix::from_fn(n, n, |r, c| v[order[c] * n + r]);
    Ok((vecs, eigvals))
}

/// Applies the Jacobi rotation `Jᵀ M J` in the (p, q) plane, zeroing `m[p][q]`.
fn rotate_sym(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let mkp = m[k * n + p];
        let mkq = m[k * n + q];
        m[k * n + p] = c * mkp - s * mkq;
        m[k * n + q] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[p * n + k];
        let mqk = m[q * n + k];
        m[p * n + k] = c * mpk - s * mqk;
        m[q * n + k] = s * mpk + c * mqk;
    }
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
}
