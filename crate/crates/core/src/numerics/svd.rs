use serde::{Deserialize, Serialize};

use crate::error::{MasqError, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(sigma) · vt`.
///
/// For an `m x n` input with `k = min(m, n)`: `u` is `m x k` with orthonormal
/// columns, `sigma` has `k` non-negative values in descending order, and `vt`
/// is `k x n` with orthonormal rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.sigma)
            .expect("svd factor shapes agree")
            .matmul(&self.vt)
            .expect("svd factor shapes agree")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of the taller orientation are orthogonalized pairwise until every
/// pair is orthogonal to machine precision; singular values are the resulting
/// column norms. Left vectors belonging to zero singular values are completed
/// to an orthonormal set by Gram-Schmidt against the canonical basis.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        });
    }
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j of A, v[j] column j of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        converged = true;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = col_products(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
    }
    if !converged {
        return Err(MasqError::Numeric(format!(
            "one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let tiny = smax * (m.max(n) as f64) * f64::EPSILON * 1e-3;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (&j, &s) in order.iter().zip(&sigma) {
        if s > tiny && s > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, m));
        }
    }

    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let vt = Matrix::from_fn(n, n, |r, c| v[order[r]][c]);
    Ok(SvdResult { u, sigma, vt })
}

/// Keeps the leading `r` singular triples. `r = 0` yields empty factors, which
/// multiply out to the zero matrix.
pub fn truncate(svd: &SvdResult, r: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let k = svd.sigma.len();
    if r > k {
        return Err(MasqError::RankTooLarge {
            rank: r,
            max: k,
            rows: svd.u.rows(),
            cols: svd.vt.cols(),
        });
    }
    Ok((
        svd.u.leading_cols(r),
        svd.sigma[..r].to_vec(),
        svd.vt.leading_rows(r),
    ))
}

/// Entropy effective rank `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σ σ_j`.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(MasqError::invalid(
            "effective_rank",
            "singular values must be finite and non-negative",
        ));
    }
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(MasqError::invalid(
            "effective_rank",
            "spectrum has no positive singular value",
        ));
    }
    let entropy: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

fn col_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A unit vector orthogonal to every vector in `basis` (which must be orthonormal
/// and have fewer than `m` members).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        // Two passes of modified Gram-Schmidt for stability.
        for _ in 0..2 {
            for b in basis {
                let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                cand.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nrm = norm(&cand);
        if nrm > 0.5 {
            return cand.into_iter().map(|x| x / nrm).collect();
        }
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(cand);
        }
    }
    let cand = best.expect("basis smaller than dimension");
    cand.into_iter().map(|x| x / best_norm).collect()
}
