//! Quantization-quality measurements: SQNR, the smoothing-misalignment
//! degradation bound, modality dominance, and the decoding cost model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmc::{
    compensate, naive_svd_baseline, reconstruction_loss, weight_residual, whitening_transform, LowRankCorrection,
    WhiteningEps,
};
use crate::error::{MasqError, Result};
use crate::mas::{CalibrationSet, ModalityId};
use crate::numerics::{svd, Matrix};
use crate::quantizer::{compute_qparams, fake_quantize, fake_quantize_weight, QuantScheme};
use crate::smoothing::SmoothingVector;

/// Default per-channel jitter for [`simulate_degradation`]; narrower bands
/// leave low-magnitude channels spanning less than one code.
pub const DEFAULT_FLAT_JITTER: f64 = 0.3;

/// Stand-in for +∞ when a token is reproduced exactly.
pub const EXACT_SQNR_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "db")]
pub enum Sqnr {
    Finite(f64),
    Exact,
}

impl Sqnr {
    /// Value in dB, with exact reconstructions capped at [`EXACT_SQNR_DB`].
    pub fn db(self) -> f64 {
        match self {
            Sqnr::Finite(v) => v.min(EXACT_SQNR_DB),
            Sqnr::Exact => EXACT_SQNR_DB,
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, Sqnr::Exact)
    }
}

/// `10·log10(‖x‖² / ‖x − x̂‖²)`.
pub fn sqnr(x: &[f64], x_hat: &[f64]) -> Result<Sqnr> {
    if x.len() != x_hat.len() {
        return Err(MasqError::dims(
            "sqnr",
            format!("{} vs {} entries", x.len(), x_hat.len()),
        ));
    }
    let signal: f64 = x.iter().map(|v| v * v).sum();
    if signal <= 0.0 {
        return Err(MasqError::invalid("sqnr", "signal has zero energy"));
    }
    let noise: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return Ok(Sqnr::Exact);
    }
    Ok(Sqnr::Finite(10.0 * (signal / noise).log10()))
}

/// Mean over rows of the per-token SQNR in dB. Rows with zero energy in the
/// reference are skipped; returns `(mean, tokens counted)`.
pub fn mean_token_sqnr(x: &Matrix, x_hat: &Matrix) -> Result<(f64, usize)> {
    if x.shape() != x_hat.shape() {
        return Err(MasqError::dims(
            "mean_token_sqnr",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..x.rows() {
        if x.row(r).iter().all(|v| *v == 0.0) {
            continue;
        }
        sum += sqnr(x.row(r), x_hat.row(r))?.db();
        n += 1;
    }
    if n == 0 {
        return Err(MasqError::invalid("mean_token_sqnr", "no token with nonzero energy"));
    }
    Ok((sum / n as f64, n))
}

/// SQNR of the smoothed token `x / s` against its symmetric per-token
/// quantization at `bits`.
pub fn smoothed_token_sqnr(s: &SmoothingVector, x: &[f64], bits: u8) -> Result<Sqnr> {
    if s.len() != x.len() {
        return Err(MasqError::dims(
            "smoothed_token_sqnr",
            format!("token has {} channels, s has {}", x.len(), s.len()),
        ));
    }
    let xs: Vec<f64> = x.iter().zip(s.as_slice()).map(|(v, si)| v / si).collect();
    let token = Matrix::new(1, xs.len(), xs)?;
    let scheme = QuantScheme::activation(bits)?;
    let q = fake_quantize(&token, &compute_qparams(&token, &scheme)?, &scheme)?;
    sqnr(token.data(), q.data())
}

/// Mean per-token smoothed SQNR over the rows of `x`.
pub fn mean_smoothed_sqnr(s: &SmoothingVector, x: &Matrix, bits: u8) -> Result<f64> {
    let xs = x.scale_cols(&s.recip())?;
    let scheme = QuantScheme::activation(bits)?;
    let q = fake_quantize(&xs, &compute_qparams(&xs, &scheme)?, &scheme)?;
    Ok(mean_token_sqnr(&xs, &q)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationVariant {
    /// `10·log10(d·min α² / Σ α⁻²)`, which is nonzero for uniform α.
    Printed,
    /// `10·log10(d / (min α² · Σ α⁻²))`, zero iff α is uniform.
    Proof,
}

/// Predicted SQNR loss (dB) of a non-dominant modality under a smoothing
/// vector that is `α_i` times its own ideal factor at channel `i`.
pub fn theorem1_degradation(alpha: &[f64], variant: DegradationVariant) -> Result<f64> {
    if alpha.is_empty() {
        return Err(MasqError::invalid("theorem1_degradation", "alpha is empty"));
    }
    if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(MasqError::invalid("theorem1_degradation", "alpha must be positive and finite"));
    }
    let d = alpha.len() as f64;
    let min = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = match variant {
        DegradationVariant::Printed => {
            d * min * min / alpha.iter().map(|a| 1.0 / (a * a)).sum::<f64>()
        }
        // min α² · Σ α⁻² written as Σ (min α / α_i)², exact for uniform α
        DegradationVariant::Proof => d / alpha.iter().map(|a| (min / a).powi(2)).sum::<f64>(),
    };
    Ok(10.0 * ratio.log10())
}

/// Measured and predicted degradation for one α pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationMeasurement {
    pub own_db: f64,
    pub unified_db: f64,
    pub empirical_db: f64,
    pub predicted_db: f64,
}

/// Simulates tokens of the non-dominant modality that are flat after their own
/// smoothing (`x_i / R_i ≈ c`), and compares their SQNR under `s = R` with
/// `s = α·R`.
///
/// An exactly flat token lands on the grid and has no error at all, so each
/// channel gets an independent multiplicative jitter in `[1 − jitter, 1]`.
pub fn simulate_degradation(
    alpha: &[f64],
    bits: u8,
    tokens: usize,
    jitter: f64,
    seed: u64,
) -> Result<DegradationMeasurement> {
    if tokens == 0 || !(0.0..1.0).contains(&jitter) {
        return Err(MasqError::invalid(
            "simulate_degradation",
            "need tokens > 0 and jitter in [0, 1)",
        ));
    }
    let predicted_db = theorem1_degradation(alpha, DegradationVariant::Proof)?;
    let d = alpha.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges_dist = LogNormal::new(0.0, 1.0).expect("valid log-normal");
    let own: Vec<f64> = (0..d).map(|_| ranges_dist.sample(&mut rng)).collect();
    let unified: Vec<f64> = own.iter().zip(alpha).map(|(r, a)| r * a).collect();
    let s_own = SmoothingVector::new(own.clone())?;
    let s_uni = SmoothingVector::new(unified)?;
    // The channel with the smallest α keeps its full magnitude so both
    // smoothings see the same token maximum as the flat token would.
    let anchor = (0..d)
        .min_by(|&a, &b| alpha[a].total_cmp(&alpha[b]))
        .expect("alpha is non-empty");
    let (mut own_sum, mut uni_sum) = (0.0, 0.0);
    for _ in 0..tokens {
        let c: f64 = rng.random_range(0.5..2.0);
        let x: Vec<f64> = own
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let u = if i == anchor { 1.0 } else { 1.0 - jitter * rng.random::<f64>() };
                sign * c * r * u
            })
            .collect();
        own_sum += smoothed_token_sqnr(&s_own, &x, bits)?.db();
        uni_sum += smoothed_token_sqnr(&s_uni, &x, bits)?.db();
    }
    let own_db = own_sum / tokens as f64;
    let unified_db = uni_sum / tokens as f64;
    Ok(DegradationMeasurement {
        own_db,
        unified_db,
        empirical_db: own_db - unified_db,
        predicted_db,
    })
}

/// Which modality sets the per-channel maximum range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceStats {
    /// Fraction of channels won outright by each modality.
    pub fractions: BTreeMap<ModalityId, f64>,
    /// Fraction of channels where two or more modalities share the maximum.
    pub tied: f64,
    /// Tied channels attributed to the lexicographically first modality
    /// among those sharing the maximum.
    pub tied_by_first: BTreeMap<ModalityId, f64>,
    pub channels: usize,
}

impl DominanceStats {
    /// Fractions with tied channels credited to their first modality; sums to 1.
    pub fn with_ties_assigned(&self) -> BTreeMap<ModalityId, f64> {
        self.fractions
            .iter()
            .map(|(m, f)| (m.clone(), f + self.tied_by_first.get(m).copied().unwrap_or(0.0)))
            .collect()
    }
}

pub fn dominance_stats(calib: &CalibrationSet) -> Result<DominanceStats> {
    let modalities: Vec<&ModalityId> = calib.modalities().collect();
    if modalities.len() < 2 {
        return Err(MasqError::invalid("dominance_stats", "need at least two modalities"));
    }
    let ranges = modalities
        .iter()
        .map(|m| calib.range(m))
        .collect::<Result<Vec<_>>>()?;
    let d = calib.d_in();
    let mut wins = vec![0usize; modalities.len()];
    let mut tie_first = vec![0usize; modalities.len()];
    let mut tied = 0usize;
    for i in 0..d {
        let best = ranges.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut holders = (0..modalities.len()).filter(|&k| ranges[k][i] == best);
        let first = holders.next().expect("some modality attains the max");
        if holders.next().is_some() {
            tied += 1;
            tie_first[first] += 1;
        } else {
            wins[first] += 1;
        }
    }
    let frac = |n: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(DominanceStats {
        fractions: modalities.iter().zip(&wins).map(|(m, &w)| ((*m).clone(), frac(w))).collect(),
        tied: frac(tied),
        tied_by_first: modalities
            .iter()
            .zip(&tie_first)
            .filter(|(_, &t)| t > 0)
            .map(|(m, &t)| ((*m).clone(), frac(t)))
            .collect(),
        channels: d,
    })
}

/// Per-token decoding compute and extra weight memory, in multiply-accumulate
/// and parameter units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub d: u64,
    pub rank: u64,
    pub extra_modalities: u64,
    pub text_compute: u64,
    pub text_memory: u64,
    pub other_compute: u64,
    pub other_memory: u64,
}

pub fn cost_model(d: u64, r: u64, m: u64) -> CostModel {
    CostModel {
        d,
        rank: r,
        extra_modalities: m,
        text_compute: d,
        text_memory: 0,
        other_compute: d + 2 * r * d,
        other_memory: 2 * m * r * d,
    }
}

/// Mean SQNR per layer and per modality for one quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqnrReport {
    pub profile: String,
    pub token_counts: BTreeMap<ModalityId, usize>,
    /// Outer index is the linear layer in execution order.
    pub layer_sqnr_db: Vec<BTreeMap<ModalityId, f64>>,
    pub output_sqnr_db: BTreeMap<ModalityId, f64>,
    pub output_mse: BTreeMap<ModalityId, f64>,
}

/// Per-channel range ratios used to exercise the degradation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlphaPattern {
    Constant(f64),
    /// Channels alternate between the two values.
    TwoLevel(f64, f64),
    /// `exp(σ·z)` with standard normal `z`, shifted so the minimum is 1.
    LogNormal(f64),
}

impl AlphaPattern {
    pub fn alphas(&self, d: usize, seed: u64) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(MasqError::invalid("AlphaPattern::alphas", "d must be positive"));
        }
        Ok(match *self {
            AlphaPattern::Constant(a) => vec![a; d],
            AlphaPattern::TwoLevel(lo, hi) => (0..d).map(|i| if i % 2 == 0 { lo } else { hi }).collect(),
            AlphaPattern::LogNormal(sigma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = LogNormal::new(0.0, sigma)
                    .map_err(|e| MasqError::invalid("AlphaPattern::alphas", e.to_string()))?;
                let raw: Vec<f64> = (0..d).map(|_| dist.sample(&mut rng)).collect();
                let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
                raw.into_iter().map(|a| a / min).collect()
            }
        })
    }

    pub fn is_uniform(&self) -> bool {
        match *self {
            AlphaPattern::Constant(_) => true,
            AlphaPattern::TwoLevel(lo, hi) => lo == hi,
            AlphaPattern::LogNormal(sigma) => sigma == 0.0,
        }
    }
}

impl std::fmt::Display for AlphaPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlphaPattern::Constant(a) => write!(f, "constant:{a}"),
            AlphaPattern::TwoLevel(lo, hi) => write!(f, "two-level:{lo}:{hi}"),
            AlphaPattern::LogNormal(s) => write!(f, "log-normal:{s}"),
        }
    }
}

impl std::str::FromStr for AlphaPattern {
    type Err = MasqError;

    /// `constant:A`, `two-level:LO:HI` or `log-normal:SIGMA`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || MasqError::Config(format!("bad alpha pattern `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            let v: f64 = parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        let pattern = match (parts[0], parts.len()) {
            ("constant", 2) => AlphaPattern::Constant(num(1)?),
            ("two-level", 3) => AlphaPattern::TwoLevel(num(1)?, num(2)?),
            ("log-normal", 2) => AlphaPattern::LogNormal(num(1)?),
            _ => return Err(bad()),
        };
        let positive = match pattern {
            AlphaPattern::Constant(a) => a > 0.0,
            AlphaPattern::TwoLevel(lo, hi) => lo > 0.0 && hi > 0.0,
            AlphaPattern::LogNormal(_) => true,
        };
        if !positive {
            return Err(bad());
        }
        Ok(pattern)
    }
}

impl TryFrom<String> for AlphaPattern {
    type Error = MasqError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlphaPattern> for String {
    fn from(p: AlphaPattern) -> String {
        p.to_string()
    }
}

/// One seeded instance comparing the whitened correction with its
/// alternatives on `‖Xs·(ΔW − L)‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Trial {
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub cmc_loss: f64,
    /// `Σ_{i>r} σ_i²` of `SVD(Xs·ΔW)`.
    pub tail_energy: f64,
    pub naive_loss: f64,
    pub best_random_loss: f64,
    /// Random candidates with a loss strictly below the whitened one.
    pub random_below: usize,
    pub candidates: usize,
}

impl Theorem2Trial {
    pub fn relative_gap(&self) -> f64 {
        (self.cmc_loss - self.tail_energy).abs() / self.tail_energy.max(f64::MIN_POSITIVE)
    }
}

/// Builds `ΔW = diag(s_m)·W − Q(S_t·W)` from random weights and factors at 4
/// bits, with anisotropic correlated activations, and scores the rank-`r`
/// correction against the tail energy, the plain truncated SVD, and
/// `candidates` random rank-`r` factorizations (half drawn freely, half
/// perturbations of the optimum).
pub fn theorem2_trial(
    seed: u64,
    d_in: usize,
    d_out: usize,
    tokens: usize,
    rank: usize,
    candidates: usize,
) -> Result<Theorem2Trial> {
    if tokens < 2 * d_in {
        return Err(MasqError::invalid("theorem2_trial", "need at least 2·D_in tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    };
    let mix = gaussian(d_in, d_in, &mut rng);
    let scales: Vec<f64> = (0..d_in).map(|i| 10f64.powf(-2.0 * i as f64 / d_in as f64)).collect();
    let xs = gaussian(tokens, d_in, &mut rng).scale_cols(&scales)?.matmul(&mix)?;
    let w = gaussian(d_in, d_out, &mut rng).scale(1.0 / (d_in as f64).sqrt());
    let factor = |rng: &mut ChaCha8Rng| {
        SmoothingVector::new((0..d_in).map(|_| rng.random_range(0.25f64..4.0)).collect())
    };
    let (s_t, s_m) = (factor(&mut rng)?, factor(&mut rng)?);
    let base = fake_quantize_weight(&w.scale_rows(s_t.as_slice())?, &QuantScheme::weight(4)?)?;
    let delta = weight_residual(&s_m, &w, &base)?;

    let m = ModalityId::vision();
    let whitening = whitening_transform(&xs, WhiteningEps::Absolute(0.0))?;
    let best = compensate(&delta, &whitening, rank, m.clone())?;
    let cmc_loss = reconstruction_loss(&xs, &delta, &best)?;
    let sigma = svd(&xs.matmul(&delta)?)?.sigma;
    let tail_energy: f64 = sigma.iter().skip(rank).map(|s| s * s).sum();
    let naive_loss = reconstruction_loss(&xs, &delta, &naive_svd_baseline(&delta, rank, m.clone())?)?;

    let energy = delta.frobenius_norm() / ((d_in * d_out) as f64).sqrt();
    let mut best_random_loss = f64::INFINITY;
    let mut random_below = 0;
    for c in 0..candidates {
        let cand = if c % 2 == 0 {
            LowRankCorrection {
                l1: gaussian(d_in, rank, &mut rng),
                l2: gaussian(rank, d_out, &mut rng).scale(energy),
                rank,
                modality: m.clone(),
                whitening_eps: 0.0,
            }
        } else {
            let noise: f64 = rng.random_range(1e-3..1e-1);
            let l1 = best.l1.add(&gaussian(d_in, rank, &mut rng).scale(noise * best.l1.max_abs()))?;
            let l2 = best.l2.add(&gaussian(rank, d_out, &mut rng).scale(noise * best.l2.max_abs()))?;
            LowRankCorrection {
                l1,
                l2,
                ..best.clone()
            }
        };
        let loss = reconstruction_loss(&xs, &delta, &cand)?;
        best_random_loss = best_random_loss.min(loss);
        if loss < cmc_loss {
            random_below += 1;
        }
    }
    Ok(Theorem2Trial {
        seed,
        d_in,
        d_out,
        rank,
        cmc_loss,
        tail_energy,
        naive_loss,
        best_random_loss,
        random_below,
        candidates,
    })
}
