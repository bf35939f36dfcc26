//! Modality-aware smoothing: one learnable smoothing vector per modality,
//! initialized in closed form and refined against a weighted quantization
//! reconstruction objective.

mod calibration;
mod optimize;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use calibration::{CalibrationSet, ModalityId};
pub use optimize::{
    optimize_factors, optimize_factors_traced, optimize_shared, weighted_objective, OptimizeTrace,
};

use crate::error::{MasqError, Result};
use crate::numerics::Matrix;
use crate::quantizer::BitProfile;
use crate::smoothing::{apply_smoothing, smoothquant_factors, SmoothingVector, STAT_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SignDescent,
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MasConfig {
    /// Per-modality loss weight; modalities not listed weigh 1.0.
    pub lambda: BTreeMap<ModalityId, f64>,
    pub epochs: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for MasConfig {
    fn default() -> Self {
        Self {
            lambda: BTreeMap::new(),
            epochs: 2,
            step_size: 1e-2,
            optimizer: Optimizer::AdaptiveMoment,
            seed: 0,
        }
    }
}

impl MasConfig {
    pub fn lambda_for(&self, m: &ModalityId) -> f64 {
        self.lambda.get(m).copied().unwrap_or(1.0)
    }

    pub fn validate<'a>(&self, modalities: impl IntoIterator<Item = &'a ModalityId>) -> Result<()> {
        if self.lambda.values().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(MasqError::Config("lambda weights must be finite and >= 0".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(MasqError::Config("step_size must be positive".into()));
        }
        if !modalities.into_iter().any(|m| self.lambda_for(m) > 0.0) {
            return Err(MasqError::Config("at least one lambda must be positive".into()));
        }
        Ok(())
    }
}

/// One smoothing vector per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityFactors(pub BTreeMap<ModalityId, SmoothingVector>);

impl ModalityFactors {
    pub fn get(&self, m: &ModalityId) -> Result<&SmoothingVector> {
        self.0
            .get(m)
            .ok_or_else(|| MasqError::UnknownModality(m.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModalityId, &SmoothingVector)> {
        self.0.iter()
    }

    /// The same vector for every listed modality.
    pub fn shared<'a>(
        s: &SmoothingVector,
        modalities: impl IntoIterator<Item = &'a ModalityId>,
    ) -> Self {
        Self(modalities.into_iter().map(|m| (m.clone(), s.clone())).collect())
    }
}

/// `s^m_i = sqrt(max_t |x^m_{t,i}| / max_j |w_{i,j}|)` for every modality.
pub fn init_modality_factors(calib: &CalibrationSet, w: &Matrix) -> Result<ModalityFactors> {
    if w.rows() != calib.d_in() {
        return Err(MasqError::dims(
            "init_modality_factors",
            format!("calibration has {} channels, weight has {} rows", calib.d_in(), w.rows()),
        ));
    }
    let w_absmax: Vec<f64> = w
        .row_iter()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let mut out = BTreeMap::new();
    for m in calib.modalities() {
        let range = calib.range(m)?;
        let s = range
            .iter()
            .zip(&w_absmax)
            .map(|(&r, &wm)| (r.max(STAT_FLOOR) / wm.max(STAT_FLOOR)).sqrt())
            .collect();
        out.insert(m.clone(), SmoothingVector::new(s)?);
    }
    Ok(ModalityFactors(out))
}

/// Mean absolute error of `Q(X·S⁻¹)·Q(S·W)` against `X·W`.
pub fn mae_loss(s: &SmoothingVector, x: &Matrix, w: &Matrix, profile: &BitProfile) -> Result<f64> {
    let target = x.matmul(w)?;
    mae_against(s, x, w, &target, profile)
}

pub(crate) fn mae_against(
    s: &SmoothingVector,
    x: &Matrix,
    w: &Matrix,
    target: &Matrix,
    profile: &BitProfile,
) -> Result<f64> {
    let (xs, ws) = apply_smoothing(x, w, s)?;
    let y = profile
        .quantize_activation(&xs)?
        .matmul(&profile.quantize_weight(&ws)?)?;
    let n = y.data().len().max(1) as f64;
    Ok(y.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// `α_i = R^dominant_i / max(R^other_i, 1e-12)`.
pub fn range_ratio(
    calib: &CalibrationSet,
    dominant: &ModalityId,
    other: &ModalityId,
) -> Result<Vec<f64>> {
    let rd = calib.range(dominant)?;
    let ro = calib.range(other)?;
    Ok(rd.iter().zip(ro).map(|(a, b)| a / b.max(STAT_FLOOR)).collect())
}

/// SmoothQuant factors at β = 0.5 for one modality; equal to
/// [`init_modality_factors`] up to rounding.
pub fn modality_smoothquant(calib: &CalibrationSet, m: &ModalityId, w: &Matrix) -> Result<SmoothingVector> {
    smoothquant_factors(&calib.channel_stats(m, w)?, 0.5)
}
