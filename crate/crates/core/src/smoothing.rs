//! Closed-form channel-wise smoothing factors and the invariance transform
//! `X·W = (X·S⁻¹)·(S·W)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MasqError, Result};
use crate::mas::{mae_loss, ModalityId};
use crate::numerics::Matrix;
use crate::quantizer::BitProfile;

/// Floor for zero channel statistics before exponentiation.
pub const STAT_FLOOR: f64 = 1e-12;

pub const DEFAULT_BETA: f64 = 0.5;

/// Diagonal of the smoothing matrix `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SmoothingVector(Vec<f64>);

impl SmoothingVector {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if let Some(i) = s.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MasqError::invalid(
                "SmoothingVector::new",
                format!("factor {i} is {} (must be finite and positive)", s[i]),
            ));
        }
        Ok(Self(s))
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn recip(&self) -> Vec<f64> {
        self.0.iter().map(|v| 1.0 / v).collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for SmoothingVector {
    type Error = MasqError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SmoothingVector> for Vec<f64> {
    fn from(s: SmoothingVector) -> Self {
        s.0
    }
}

/// Per-input-channel statistics of one activation set and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// `max_t |x_{t,i}|`
    pub act_absmax: Vec<f64>,
    /// `mean_t |x_{t,i}|`
    pub act_absmean: Vec<f64>,
    /// `max_j |w_{i,j}|` over the output dimension of `W` (`D_in x D_out`).
    pub w_absmax: Vec<f64>,
}

impl ChannelStats {
    pub fn d_in(&self) -> usize {
        self.act_absmax.len()
    }
}

pub fn collect_channel_stats(x: &Matrix, w: &Matrix) -> Result<ChannelStats> {
    if x.cols() != w.rows() {
        return Err(MasqError::dims(
            "collect_channel_stats",
            format!("activations have {} channels, weight has {} rows", x.cols(), w.rows()),
        ));
    }
    let d = x.cols();
    let mut act_absmax = vec![0.0f64; d];
    let mut act_sum = vec![0.0f64; d];
    for row in x.row_iter() {
        for ((m, s), v) in act_absmax.iter_mut().zip(act_sum.iter_mut()).zip(row) {
            *m = m.max(v.abs());
            *s += v.abs();
        }
    }
    let t = x.rows().max(1) as f64;
    let act_absmean = act_sum.into_iter().map(|s| s / t).collect();
    let w_absmax = w
        .row_iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    Ok(ChannelStats {
        act_absmax,
        act_absmean,
        w_absmax,
    })
}

/// `s_i = max|x_i|^β / max|w_i|^(1−β)`.
pub fn smoothquant_factors(stats: &ChannelStats, beta: f64) -> Result<SmoothingVector> {
    check_beta(beta)?;
    migration_factors(&stats.act_absmax, &stats.w_absmax, beta)
}

fn migration_factors(act: &[f64], w: &[f64], beta: f64) -> Result<SmoothingVector> {
    if act.len() != w.len() {
        return Err(MasqError::dims("smoothquant_factors", "stat lengths differ"));
    }
    SmoothingVector::new(
        act.iter()
            .zip(w)
            .map(|(&a, &w)| a.max(STAT_FLOOR).powf(beta) / w.max(STAT_FLOOR).powf(1.0 - beta))
            .collect(),
    )
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(MasqError::invalid("smoothing", format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

/// Default search grid `{0.05, 0.10, …, 0.95}`.
pub fn default_awq_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Grid search over `s_i = mean|x_i|^β`, keeping the β with the lowest
/// reconstruction loss. Losses within a relative 1e-12 count as ties and the
/// smaller β wins.
pub fn awq_factors(
    x: &Matrix,
    w: &Matrix,
    beta_grid: &[f64],
    profile: &BitProfile,
) -> Result<(SmoothingVector, f64)> {
    if beta_grid.is_empty() {
        return Err(MasqError::invalid("awq_factors", "empty beta grid"));
    }
    let stats = collect_channel_stats(x, w)?;
    let mut grid = beta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(SmoothingVector, f64, f64)> = None;
    for beta in grid {
        check_beta(beta)?;
        let s = SmoothingVector::new(
            stats
                .act_absmean
                .iter()
                .map(|a| a.max(STAT_FLOOR).powf(beta))
                .collect(),
        )?;
        let loss = mae_loss(&s, x, w, profile)?;
        let better = match &best {
            None => true,
            Some((_, _, b)) => loss < *b - (1e-12 * b.abs().max(loss.abs()) + 1e-300),
        };
        if better {
            best = Some((s, beta, loss));
        }
    }
    let (s, beta, _) = best.expect("grid is non-empty");
    Ok((s, beta))
}

/// SmoothQuant factors driven by the largest range over all modalities.
pub fn unified_factors(
    stats_per_modality: &BTreeMap<ModalityId, ChannelStats>,
    beta: f64,
) -> Result<SmoothingVector> {
    check_beta(beta)?;
    let mut it = stats_per_modality.values();
    let first = it
        .next()
        .ok_or_else(|| MasqError::invalid("unified_factors", "no modalities"))?;
    let mut act = first.act_absmax.clone();
    for st in it {
        if st.d_in() != act.len() {
            return Err(MasqError::dims("unified_factors", "modalities disagree on D_in"));
        }
        act.iter_mut()
            .zip(&st.act_absmax)
            .for_each(|(a, &b)| *a = a.max(b));
    }
    migration_factors(&act, &first.w_absmax, beta)
}

/// Returns `(X·diag(1/s), diag(s)·W)`.
pub fn apply_smoothing(x: &Matrix, w: &Matrix, s: &SmoothingVector) -> Result<(Matrix, Matrix)> {
    if x.cols() != s.len() || w.rows() != s.len() {
        return Err(MasqError::dims(
            "apply_smoothing",
            format!(
                "X is {}x{}, W is {}x{}, s has {} entries",
                x.rows(),
                x.cols(),
                w.rows(),
                w.cols(),
                s.len()
            ),
        ));
    }
    Ok((x.scale_cols(&s.recip())?, w.scale_rows(s.as_slice())?))
}
