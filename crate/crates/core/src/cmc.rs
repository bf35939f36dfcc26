//! Cross-modal compensation.
//!
//! Only `Q(S_t·W)` is stored. For any other modality `m`, the residual
//! `ΔW = S_m·W − Q(S_t·W)` is approximated by `L1·L2`, obtained from the
//! truncated SVD of the whitened residual `T·ΔW` with `T = Λ^{1/2}·Pᵀ` from
//! the eigendecomposition `P·Λ·Pᵀ` of the smoothed activation Gram matrix.
//! Because `X_m·S_m⁻¹ = U·T` with `U` orthonormal, this minimizes
//! `‖X_m·S_m⁻¹·(ΔW − L)‖_F` over all rank-`r` `L`.

use serde::{Deserialize, Serialize};

use crate::error::{MasqError, Result};
use crate::mas::ModalityId;
use crate::numerics::{qr_r, svd, sym_eig, truncate, Matrix};
use crate::smoothing::SmoothingVector;

pub const DEFAULT_RANK_RATIO: f64 = 0.08;
pub const DEFAULT_RELATIVE_EPS: f64 = 1e-8;

/// Eigenvalue regularization for the whitening transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum WhiteningEps {
    /// Added to every eigenvalue as is.
    Absolute(f64),
    /// Multiplied by the largest eigenvalue first.
    Relative(f64),
}

impl Default for WhiteningEps {
    fn default() -> Self {
        WhiteningEps::Relative(DEFAULT_RELATIVE_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub t: Matrix,
    pub t_inv: Matrix,
    /// Absolute value added to the eigenvalues.
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankCorrection {
    /// `D_in x r`
    pub l1: Matrix,
    /// `r x D_out`
    pub l2: Matrix,
    pub rank: usize,
    pub modality: ModalityId,
    /// Eigenvalue regularization used for the whitening; 0 when unwhitened.
    pub whitening_eps: f64,
}

impl LowRankCorrection {
    pub fn zero(d_in: usize, d_out: usize, modality: ModalityId) -> Self {
        Self {
            l1: Matrix::zeros(d_in, 0),
            l2: Matrix::zeros(0, d_out),
            rank: 0,
            modality,
            whitening_eps: 0.0,
        }
    }

    pub fn product(&self) -> Matrix {
        self.l1.matmul(&self.l2).expect("correction factors chain")
    }

    /// `xs · L1 · L2`, evaluated right to left through the rank-`r` bottleneck.
    pub fn apply(&self, xs: &Matrix) -> Result<Matrix> {
        xs.matmul(&self.l1)?.matmul(&self.l2)
    }

    pub fn parameter_count(&self) -> usize {
        self.l1.rows() * self.l1.cols() + self.l2.rows() * self.l2.cols()
    }
}

/// `ΔW = diag(s_m)·W − q_base`.
pub fn weight_residual(s_m: &SmoothingVector, w: &Matrix, q_base: &Matrix) -> Result<Matrix> {
    if q_base.shape() != w.shape() {
        return Err(MasqError::dims(
            "weight_residual",
            format!("weight {:?} vs base {:?}", w.shape(), q_base.shape()),
        ));
    }
    w.scale_rows(s_m.as_slice())?.sub(q_base)
}

/// Eigenpairs of `Xsᵀ·Xs`, descending. For tall inputs they come from the
/// SVD of the QR factor `R`, which avoids squaring the condition number.
fn gram_eig(xs: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if xs.rows() < xs.cols() {
        return sym_eig(&xs.gram());
    }
    let dec = svd(&qr_r(xs))?;
    Ok((dec.vt.transpose(), dec.sigma.iter().map(|s| s * s).collect()))
}

pub fn whitening_transform(xs: &Matrix, eps: WhiteningEps) -> Result<WhiteningTransform> {
    if xs.rows() == 0 {
        return Err(MasqError::invalid("whitening_transform", "need at least one token"));
    }
    let (p, lambda) = gram_eig(xs)?;
    let n = lambda.len();
    let lmax = lambda.first().copied().unwrap_or(0.0).max(0.0);
    let eps_abs = match eps {
        WhiteningEps::Absolute(e) => e,
        WhiteningEps::Relative(r) => r * lmax,
    };
    if !(eps_abs.is_finite() && eps_abs >= 0.0) {
        return Err(MasqError::invalid("whitening_transform", "eps must be finite and >= 0"));
    }
    let lmin = lambda.last().copied().unwrap_or(0.0);
    let degenerate = lmax <= 0.0
        || lmin + eps_abs <= 0.0
        || (eps_abs == 0.0 && lmin <= lmax * f64::EPSILON * n as f64);
    if degenerate {
        return Err(MasqError::RankDeficient {
            min_eig: lmin,
            max_eig: lmax,
        });
    }
    let root: Vec<f64> = lambda.iter().map(|l| (l + eps_abs).sqrt()).collect();
    // T = (P·Λ^{1/2})ᵀ, T⁻¹ = P·Λ^{-1/2}
    let t = Matrix::from_fn(n, n, |i, j| root[i] * p[(j, i)]);
    let t_inv = Matrix::from_fn(n, n, |i, j| p[(i, j)] / root[j]);
    Ok(WhiteningTransform {
        t,
        t_inv,
        eps: eps_abs,
    })
}

fn check_rank(r: usize, m: &Matrix) -> Result<()> {
    let max = m.rows().min(m.cols());
    if r > max {
        return Err(MasqError::RankTooLarge {
            rank: r,
            max,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(())
}

/// Whitened truncated-SVD correction: `L1 = T⁻¹·U_r`, `L2 = Σ_r·V_rᵀ`.
pub fn compensate(
    delta_w: &Matrix,
    whitening: &WhiteningTransform,
    r: usize,
    modality: ModalityId,
) -> Result<LowRankCorrection> {
    check_rank(r, delta_w)?;
    if r == 0 {
        return Ok(LowRankCorrection {
            whitening_eps: whitening.eps,
            ..LowRankCorrection::zero(delta_w.rows(), delta_w.cols(), modality)
        });
    }
    let whitened = whitening.t.matmul(delta_w)?;
    let dec = svd(&whitened)?;
    let (u_r, sigma_r, vt_r) = truncate(&dec, r)?;
    Ok(LowRankCorrection {
        l1: whitening.t_inv.matmul(&u_r)?,
        l2: vt_r.scale_rows(&sigma_r)?,
        rank: r,
        modality,
        whitening_eps: whitening.eps,
    })
}

/// Plain truncated SVD of `ΔW`, ignoring the activations.
pub fn naive_svd_baseline(delta_w: &Matrix, r: usize, modality: ModalityId) -> Result<LowRankCorrection> {
    check_rank(r, delta_w)?;
    if r == 0 {
        return Ok(LowRankCorrection::zero(delta_w.rows(), delta_w.cols(), modality));
    }
    let dec = svd(delta_w)?;
    let (u_r, sigma_r, vt_r) = truncate(&dec, r)?;
    Ok(LowRankCorrection {
        l1: u_r,
        l2: vt_r.scale_rows(&sigma_r)?,
        rank: r,
        modality,
        whitening_eps: 0.0,
    })
}

/// `‖Xs·(ΔW − L1·L2)‖_F²`.
pub fn reconstruction_loss(xs: &Matrix, delta_w: &Matrix, corr: &LowRankCorrection) -> Result<f64> {
    if corr.l1.rows() != delta_w.rows() || corr.l2.cols() != delta_w.cols() {
        return Err(MasqError::dims(
            "reconstruction_loss",
            format!(
                "correction {}x{} for residual {:?}",
                corr.l1.rows(),
                corr.l2.cols(),
                delta_w.shape()
            ),
        ));
    }
    Ok(xs.matmul(&delta_w.sub(&corr.product())?)?.frobenius_sq())
}

/// `round(ratio · min(D_in, D_out))`, clamped to the valid range.
pub fn rank_for_ratio(ratio: f64, d_in: usize, d_out: usize) -> usize {
    let max = d_in.min(d_out);
    ((ratio.max(0.0) * max as f64).round() as usize).min(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::effective_rank;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Tokens with channel scales spanning two decades and correlated channels.
    fn anisotropic(tokens: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mix = gaussian(d, d, rng);
        let scales: Vec<f64> = (0..d).map(|i| 10f64.powf(-2.0 * i as f64 / d as f64)).collect();
        gaussian(tokens, d, rng).scale_cols(&scales).unwrap().matmul(&mix).unwrap()
    }

    fn tail(sigma: &[f64], r: usize) -> f64 {
        sigma[r..].iter().map(|s| s * s).sum()
    }

    #[test]
    fn residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gaussian(5, 3, &mut rng);
        let st = SmoothingVector::new(vec![1.0, 2.0, 0.5, 1.5, 3.0]).unwrap();
        let base = w.scale_rows(st.as_slice()).unwrap();
        let zero = weight_residual(&st, &w, &base).unwrap();
        assert!(zero.max_abs() == 0.0);
        let doubled = st.scaled(2.0).unwrap();
        let d = weight_residual(&doubled, &w, &base).unwrap();
        assert!(d.sub(&base).unwrap().max_abs() <= 1e-15);
        assert!(weight_residual(&st, &w, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn whitening_identity_and_scaled_orthonormal() {
        let t = whitening_transform(&Matrix::identity(4), WhiteningEps::Absolute(0.0)).unwrap();
        let tt = t.t.transpose().matmul(&t.t).unwrap();
        assert!(tt.sub(&Matrix::identity(4)).unwrap().max_abs() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = svd(&gaussian(12, 5, &mut rng)).unwrap().u.scale(7.0);
        let wt = whitening_transform(&q, WhiteningEps::Absolute(0.0)).unwrap();
        let white = q.matmul(&wt.t_inv).unwrap();
        assert!(white.gram().sub(&Matrix::identity(5)).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn whitening_random_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = anisotropic(64, 16, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::Absolute(0.0)).unwrap();
        let white = xs.matmul(&wt.t_inv).unwrap();
        assert!(white.gram().sub(&Matrix::identity(16)).unwrap().max_abs() <= 1e-8);
        assert!(wt.t.matmul(&wt.t_inv).unwrap().sub(&Matrix::identity(16)).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn whitening_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = gaussian(3, 6, &mut rng);
        assert!(matches!(
            whitening_transform(&xs, WhiteningEps::Absolute(0.0)),
            Err(MasqError::RankDeficient { .. })
        ));
        let wt = whitening_transform(&xs, WhiteningEps::default()).unwrap();
        assert!(wt.eps > 0.0);
        assert!(whitening_transform(&Matrix::zeros(0, 3), WhiteningEps::default()).is_err());
    }

    #[test]
    fn compensation_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = anisotropic(40, 8, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::Absolute(0.0)).unwrap();
        let zero = compensate(&Matrix::zeros(8, 6), &wt, 3, ModalityId::vision()).unwrap();
        assert!(zero.product().max_abs() <= 1e-300);

        let dw = gaussian(8, 6, &mut rng);
        let full = compensate(&dw, &wt, 6, ModalityId::vision()).unwrap();
        assert!(full.product().rel_frobenius_err(&dw).unwrap() <= 1e-8);
        assert!(matches!(
            compensate(&dw, &wt, 7, ModalityId::vision()),
            Err(MasqError::RankTooLarge { .. })
        ));
        let none = compensate(&dw, &wt, 0, ModalityId::vision()).unwrap();
        let base = xs.matmul(&dw).unwrap().frobenius_sq();
        assert_eq!(reconstruction_loss(&xs, &dw, &none).unwrap(), base);
        assert!(reconstruction_loss(&xs, &dw, &full).unwrap() <= 1e-16 * base);
    }

    #[test]
    fn loss_equals_tail_energy_of_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = anisotropic(96, 24, &mut rng);
        let dw = gaussian(24, 16, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::Absolute(0.0)).unwrap();
        let corr = compensate(&dw, &wt, 4, ModalityId::audio()).unwrap();
        let sigma = svd(&xs.matmul(&dw).unwrap()).unwrap().sigma;
        let loss = reconstruction_loss(&xs, &dw, &corr).unwrap();
        let expect = tail(&sigma, 4);
        assert!((loss - expect).abs() <= 1e-8 * expect);
        // and beats the unwhitened truncation
        let naive = naive_svd_baseline(&dw, 4, ModalityId::audio()).unwrap();
        assert!(loss <= reconstruction_loss(&xs, &dw, &naive).unwrap());
    }

    #[test]
    fn beats_random_rank_r_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = anisotropic(48, 10, &mut rng);
        let dw = gaussian(10, 8, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::Absolute(0.0)).unwrap();
        let r = 3;
        let best = reconstruction_loss(&xs, &dw, &compensate(&dw, &wt, r, ModalityId::vision()).unwrap()).unwrap();
        for _ in 0..1000 {
            let cand = LowRankCorrection {
                l1: gaussian(10, r, &mut rng),
                l2: gaussian(r, 8, &mut rng).scale(0.3),
                rank: r,
                modality: ModalityId::vision(),
                whitening_eps: 0.0,
            };
            assert!(best <= reconstruction_loss(&xs, &dw, &cand).unwrap());
        }
    }

    #[test]
    fn naive_baseline_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = gaussian(9, 2, &mut rng);
        let v = gaussian(2, 7, &mut rng);
        let low = u.matmul(&v).unwrap();
        let xs = anisotropic(30, 9, &mut rng);
        let corr = naive_svd_baseline(&low, 2, ModalityId::vision()).unwrap();
        assert!(reconstruction_loss(&xs, &low, &corr).unwrap() <= 1e-18 * xs.matmul(&low).unwrap().frobenius_sq());

        // Isotropic activations: whitening is a rotation-free scaling.
        let q = svd(&gaussian(40, 9, &mut rng)).unwrap().u.scale(3.0);
        let dw = gaussian(9, 7, &mut rng);
        let wt = whitening_transform(&q, WhiteningEps::Absolute(0.0)).unwrap();
        let a = reconstruction_loss(&q, &dw, &compensate(&dw, &wt, 3, ModalityId::vision()).unwrap()).unwrap();
        let b = reconstruction_loss(&q, &dw, &naive_svd_baseline(&dw, 3, ModalityId::vision()).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-6 * b);
    }

    #[test]
    fn loss_monotone_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = anisotropic(50, 12, &mut rng);
        let dw = gaussian(12, 10, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::Absolute(0.0)).unwrap();
        let base = xs.matmul(&dw).unwrap().frobenius_sq();
        let mut prev = f64::INFINITY;
        for r in 0..=10 {
            let l = reconstruction_loss(&xs, &dw, &compensate(&dw, &wt, r, ModalityId::vision()).unwrap()).unwrap();
            assert!(l <= prev + 1e-12 * base);
            prev = l;
        }
        assert!(prev <= 1e-9 * base);
    }

    #[test]
    fn correction_rank_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs = anisotropic(40, 12, &mut rng);
        let dw = gaussian(12, 9, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::default()).unwrap();
        let corr = compensate(&dw, &wt, 3, ModalityId::vision()).unwrap();
        let s = svd(&corr.product()).unwrap().sigma;
        assert!(s[3] <= 1e-9 * s[0]);
        assert_eq!(corr.parameter_count(), 12 * 3 + 3 * 9);
    }

    #[test]
    fn whitening_lowers_effective_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = anisotropic(128, 32, &mut rng);
        let dw = gaussian(32, 32, &mut rng);
        let wt = whitening_transform(&xs, WhiteningEps::default()).unwrap();
        let raw = effective_rank(&svd(&dw).unwrap().sigma).unwrap();
        let white = effective_rank(&svd(&wt.t.matmul(&dw).unwrap()).unwrap().sigma).unwrap();
        assert!(white < raw, "{white} vs {raw}");
    }

    #[test]
    fn rank_ratio_rounding() {
        assert_eq!(rank_for_ratio(0.08, 64, 256), 5);
        assert_eq!(rank_for_ratio(0.0, 64, 256), 0);
        assert_eq!(rank_for_ratio(2.0, 64, 256), 64);
    }
}
