use crate::numerics::Matrix;

/// Upper-triangular factor `R` (`n x n`) of the Householder QR of a tall
/// `m x n` matrix, so that `aᵀa = RᵀR`.
///
/// Panics if `a` has fewer rows than columns.
pub fn qr_r(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    assert!(m >= n, "qr_r needs a tall matrix, got {m}x{n}");
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        cols[k][k] = alpha;
        cols[k][k + 1..].iter_mut().for_each(|t| *t = 0.0);
        if vv == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(k + 1) {
            let tail = &mut col[k..];
            let f = 2.0 * v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum::<f64>() / vv;
            tail.iter_mut().zip(&v).for_each(|(t, vi)| *t -= f * vi);
        }
    }
    Matrix::from_fn(n, n, |r, c| if r <= c { cols[c][r] } else { 0.0 })
}
