//! Layer-level diagnostics: activation SQNR under learned vs unified
//! smoothing, and the shared-weight path as the correction rank grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{align_gauge, layer_seed, mas_factors};
use super::{DenseModel, Method, PipelineConfig, StoredWeight};
use crate::analytics::{dominance_stats, mean_smoothed_sqnr, mean_token_sqnr, theorem1_degradation, DegradationVariant};
use crate::cmc::{
    compensate, naive_svd_baseline, rank_for_ratio, weight_residual, whitening_transform, LowRankCorrection,
};
use crate::error::{MasqError, Result};
use crate::mas::{init_modality_factors, optimize_factors_traced, CalibrationSet, MasConfig, ModalityId};
use crate::numerics::{effective_rank, svd, Matrix};
use crate::quantizer::BitProfile;
use crate::smoothing::{unified_factors, STAT_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub rank: usize,
    pub whitened_db: f64,
    pub naive_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub layer: usize,
    pub modality: ModalityId,
    /// Own stored weight `Q(S_m·W)`, no correction.
    pub mas_db: f64,
    /// Entropy effective rank of `ΔW` and of `T·ΔW`.
    pub effective_rank_residual: f64,
    pub effective_rank_whitened: f64,
    pub points: Vec<SweepPoint>,
}

/// Mean token SQNR of `Q_a(xs)·wq + correction(xs)` against `target`.
fn path_sqnr(
    profile: &BitProfile,
    xs: &Matrix,
    wq: &Matrix,
    corr: Option<&LowRankCorrection>,
    target: &Matrix,
) -> Result<f64> {
    let mut y = profile.quantize_activation(xs)?.matmul(wq)?;
    if let Some(c) = corr {
        y = y.add(&c.apply(xs)?)?;
    }
    Ok(mean_token_sqnr(target, &y)?.0)
}

/// For every layer and non-text modality, measures on the calibration inputs
/// how the corrected shared-weight path approaches the full-precision output
/// as the rank ratio grows, for the whitened and the plain truncated SVD.
pub fn cmc_rank_sweep(
    dense: &DenseModel,
    per_layer: &[CalibrationSet],
    profile: &BitProfile,
    cfg: &PipelineConfig,
    ratios: &[f64],
) -> Result<Vec<LayerSweep>> {
    if per_layer.len() != 2 * dense.depth() {
        return Err(MasqError::dims(
            "cmc_rank_sweep",
            format!("{} calibration sets for {} layers", per_layer.len(), 2 * dense.depth()),
        ));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(MasqError::invalid("cmc_rank_sweep", "rank ratios must lie in [0, 1]"));
    }
    let weights: Vec<&Matrix> = dense.weights().collect();
    let per_layer_rows = weights
        .par_iter()
        .zip(per_layer.par_iter())
        .enumerate()
        .map(|(k, (w, calib))| sweep_layer(k, w, calib, profile, cfg, ratios))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_layer_rows.into_iter().flatten().collect())
}

fn sweep_layer(
    k: usize,
    w: &Matrix,
    calib: &CalibrationSet,
    profile: &BitProfile,
    cfg: &PipelineConfig,
    ratios: &[f64],
) -> Result<Vec<LayerSweep>> {
    let (d_in, d_out) = w.shape();
    let (factors, base) = mas_factors(w, calib, profile, Method::MasCmc, cfg, layer_seed(cfg, k))?;
    let base = base.dequantized();
    let mut out = Vec::new();
    for m in calib.modalities().filter(|m| !m.is_text()) {
        let x = calib.stacked(m)?;
        let target = x.matmul(w)?;
        let s_own = factors.get(m)?;
        let own = StoredWeight::from_weight(&w.scale_rows(s_own.as_slice())?, profile)?.dequantized();
        let mas_db = path_sqnr(profile, &x.scale_cols(&s_own.recip())?, &own, None, &target)?;

        let s_m = align_gauge(s_own, &x, w, &base)?;
        let xs = x.scale_cols(&s_m.recip())?;
        let whitening = whitening_transform(&xs, cfg.eps)?;
        let delta = weight_residual(&s_m, w, &base)?;
        let points = ratios
            .iter()
            .map(|&ratio| {
                let r = rank_for_ratio(ratio, d_in, d_out);
                let white = compensate(&delta, &whitening, r, m.clone())?;
                let naive = naive_svd_baseline(&delta, r, m.clone())?;
                Ok(SweepPoint {
                    ratio,
                    rank: r,
                    whitened_db: path_sqnr(profile, &xs, &base, Some(&white), &target)?,
                    naive_db: path_sqnr(profile, &xs, &base, Some(&naive), &target)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LayerSweep {
            layer: k,
            modality: m.clone(),
            mas_db,
            effective_rank_residual: effective_rank(&svd(&delta)?.sigma)?,
            effective_rank_whitened: effective_rank(&svd(&whitening.t.matmul(&delta)?)?.sigma)?,
            points,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEffect {
    pub modality: ModalityId,
    /// Mean per-token SQNR of the smoothed activations at the activation bits.
    pub mas_db: f64,
    pub unified_db: f64,
    pub gain_db: f64,
    /// Degradation bound for `α_i = max_k R^k_i / R^m_i` over live channels.
    pub predicted_db: f64,
    pub live_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEffect {
    pub layer: usize,
    /// Modality that sets the most per-channel maxima.
    pub dominant: ModalityId,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Every modality except the dominant one.
    pub modalities: Vec<ModalityEffect>,
}

/// Compares learned per-modality factors with unified SmoothQuant factors on
/// each layer's calibration inputs.
pub fn mas_effectiveness(
    dense: &DenseModel,
    per_layer: &[CalibrationSet],
    profile: &BitProfile,
    cfg: &PipelineConfig,
) -> Result<Vec<LayerEffect>> {
    if per_layer.len() != 2 * dense.depth() {
        return Err(MasqError::dims(
            "mas_effectiveness",
            format!("{} calibration sets for {} layers", per_layer.len(), 2 * dense.depth()),
        ));
    }
    let weights: Vec<&Matrix> = dense.weights().collect();
    weights
        .par_iter()
        .zip(per_layer.par_iter())
        .enumerate()
        .map(|(k, (w, calib))| effect_layer(k, w, calib, profile, cfg))
        .collect()
}

fn effect_layer(
    k: usize,
    w: &Matrix,
    calib: &CalibrationSet,
    profile: &BitProfile,
    cfg: &PipelineConfig,
) -> Result<LayerEffect> {
    let bits = profile.activation.bits;
    let mas_cfg = MasConfig {
        seed: layer_seed(cfg, k),
        ..cfg.mas.clone()
    };
    let init = init_modality_factors(calib, w)?;
    let (factors, trace) = optimize_factors_traced(&init, calib, w, profile, &mas_cfg)?;
    let stats = calib
        .modalities()
        .map(|m| Ok((m.clone(), calib.channel_stats(m, w)?)))
        .collect::<Result<_>>()?;
    let unified = unified_factors(&stats, cfg.beta)?;
    let dominance = dominance_stats(calib)?;
    let dominant = dominance
        .fractions
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(m, _)| m.clone())
        .ok_or_else(|| MasqError::invalid("mas_effectiveness", "no modalities"))?;
    let mut rmax = vec![0.0f64; w.rows()];
    for m in calib.modalities() {
        for (r, v) in rmax.iter_mut().zip(calib.range(m)?) {
            *r = r.max(*v);
        }
    }
    let mut modalities = Vec::new();
    for m in calib.modalities().filter(|m| **m != dominant) {
        let x = calib.stacked(m)?;
        let mas_db = mean_smoothed_sqnr(factors.get(m)?, &x, bits)?;
        let unified_db = mean_smoothed_sqnr(&unified, &x, bits)?;
        let alpha: Vec<f64> = rmax
            .iter()
            .zip(calib.range(m)?)
            .filter(|(_, r)| **r > STAT_FLOOR)
            .map(|(a, r)| a / r)
            .collect();
        let predicted_db = if alpha.is_empty() {
            0.0
        } else {
            theorem1_degradation(&alpha, DegradationVariant::Proof)?
        };
        modalities.push(ModalityEffect {
            modality: m.clone(),
            mas_db,
            unified_db,
            gain_db: mas_db - unified_db,
            predicted_db,
            live_channels: alpha.len(),
        });
    }
    Ok(LayerEffect {
        layer: k,
        dominant,
        initial_objective: trace.initial_objective,
        final_objective: trace.final_objective,
        modalities,
    })
}
