//! Building quantized models from calibration data, and comparing them with
//! the full-precision reference.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    dense_forward_traced, forward_model_traced, relu, DenseModel, ModalSequence, QuantBlock,
    SmoothedLayer, StoredWeight, ToyModel,
};
use crate::analytics::{mean_token_sqnr, SqnrReport};
use crate::cmc::{compensate, rank_for_ratio, weight_residual, whitening_transform, WhiteningEps, DEFAULT_RANK_RATIO};
use crate::error::{MasqError, Result};
use crate::mas::{
    init_modality_factors, optimize_factors, optimize_shared, CalibrationSet, MasConfig,
    ModalityFactors, ModalityId,
};
use crate::numerics::Matrix;
use crate::quantizer::BitProfile;
use crate::smoothing::{awq_factors, default_awq_grid, unified_factors, SmoothingVector, DEFAULT_BETA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rtn")]
    Rtn,
    #[serde(rename = "smoothquant")]
    SmoothQuant,
    #[serde(rename = "awq")]
    Awq,
    #[serde(rename = "unified-learned")]
    UnifiedLearned,
    /// Learned per-modality factors, each modality with its own stored weight.
    #[serde(rename = "mas")]
    Mas,
    /// Learned per-modality factors over the single text weight plus low-rank
    /// corrections.
    #[serde(rename = "mas+cmc")]
    MasCmc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Rtn,
        Method::SmoothQuant,
        Method::Awq,
        Method::UnifiedLearned,
        Method::Mas,
        Method::MasCmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::SmoothQuant => "smoothquant",
            Method::Awq => "awq",
            Method::UnifiedLearned => "unified-learned",
            Method::Mas => "mas",
            Method::MasCmc => "mas+cmc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MasqError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MasqError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mas: MasConfig,
    /// CMC rank as a fraction of `min(D_in, D_out)`.
    pub rank_ratio: f64,
    pub eps: WhiteningEps,
    /// Migration strength for the unified SmoothQuant factors.
    pub beta: f64,
    pub awq_grid: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mas: MasConfig::default(),
            rank_ratio: DEFAULT_RANK_RATIO,
            eps: WhiteningEps::default(),
            beta: DEFAULT_BETA,
            awq_grid: default_awq_grid(),
        }
    }
}

/// Inputs of every linear layer of the full-precision model, per modality,
/// obtained by running the calibration batches through the model prefix.
pub fn calibration_per_layer(dense: &DenseModel, calib: &CalibrationSet) -> Result<Vec<CalibrationSet>> {
    if calib.d_in() != dense.d_model {
        return Err(MasqError::dims(
            "calibration_per_layer",
            format!("calibration has {} channels, model is {}-wide", calib.d_in(), dense.d_model),
        ));
    }
    let mut sets: Vec<CalibrationSet> = dense
        .weights()
        .map(|w| CalibrationSet::new(w.rows()))
        .collect();
    for m in calib.modalities() {
        for batch in calib.batches(m)? {
            let trace = dense_forward_traced(dense, batch)?;
            for (k, set) in sets.iter_mut().enumerate() {
                let input = match k {
                    0 => batch.clone(),
                    k if k % 2 == 1 => relu(&trace[k - 1]),
                    k => trace[k - 1].clone(),
                };
                set.push(m.clone(), input)?;
            }
        }
    }
    Ok(sets)
}

fn unified_vector(
    method: Method,
    w: &Matrix,
    calib: &CalibrationSet,
    profile: &BitProfile,
    cfg: &PipelineConfig,
) -> Result<SmoothingVector> {
    let stats = || -> Result<BTreeMap<ModalityId, _>> {
        calib
            .modalities()
            .map(|m| Ok((m.clone(), calib.channel_stats(m, w)?)))
            .collect()
    };
    match method {
        Method::Rtn => Ok(SmoothingVector::ones(w.rows())),
        Method::SmoothQuant => unified_factors(&stats()?, cfg.beta),
        Method::Awq => {
            let all: Vec<Matrix> = calib
                .modalities()
                .map(|m| calib.stacked(m))
                .collect::<Result<_>>()?;
            let x = Matrix::vstack(&all.iter().collect::<Vec<_>>())?;
            Ok(awq_factors(&x, w, &cfg.awq_grid, profile)?.0)
        }
        Method::UnifiedLearned => {
            let init = unified_factors(&stats()?, cfg.beta)?;
            optimize_shared(&init, calib, w, profile, &cfg.mas)
        }
        Method::Mas | Method::MasCmc => unreachable!("per-modality methods"),
    }
}

/// Rescales `s_m` so that the uncorrected shared-weight path `X·S_m⁻¹·base`
/// best matches `X·W` in least squares. The quantization objective does not
/// see a global scale of `s_m` (per-token and per-channel steps absorb it),
/// so this only moves the residual the low-rank correction has to absorb.
pub(super) fn align_gauge(s_m: &SmoothingVector, x: &Matrix, w: &Matrix, base: &Matrix) -> Result<SmoothingVector> {
    let target = x.matmul(w)?;
    let shared = x.scale_cols(&s_m.recip())?.matmul(base)?;
    let dot: f64 = target.data().iter().zip(shared.data()).map(|(a, b)| a * b).sum();
    let norm = shared.frobenius_sq();
    if !(dot > 0.0 && norm > 0.0) {
        return Ok(s_m.clone());
    }
    s_m.scaled(norm / dot)
}

pub(super) fn layer_seed(cfg: &PipelineConfig, k: usize) -> u64 {
    cfg.mas.seed.wrapping_add(k as u64)
}

/// Learned per-modality factors for one layer and the shared base `Q(S_t·W)`.
pub(super) fn mas_factors(
    w: &Matrix,
    calib: &CalibrationSet,
    profile: &BitProfile,
    method: Method,
    cfg: &PipelineConfig,
    layer_seed: u64,
) -> Result<(ModalityFactors, StoredWeight)> {
    let text = ModalityId::text();
    if !calib.contains(&text) {
        return Err(MasqError::invalid(
            "build_pipeline",
            format!("{method} needs calibration data for the base modality `text`"),
        ));
    }
    let mas_cfg = MasConfig {
        seed: layer_seed,
        ..cfg.mas.clone()
    };
    let init = init_modality_factors(calib, w)?;
    let factors = optimize_factors(&init, calib, w, profile, &mas_cfg)?;
    let base = StoredWeight::from_weight(&w.scale_rows(factors.get(&text)?.as_slice())?, profile)?;
    Ok((factors, base))
}

fn build_layer(
    w: &Matrix,
    calib: &CalibrationSet,
    profile: &BitProfile,
    method: Method,
    cfg: &PipelineConfig,
    layer_seed: u64,
) -> Result<SmoothedLayer> {
    let (d_in, d_out) = w.shape();
    let modalities: Vec<ModalityId> = calib.modalities().cloned().collect();
    let mut layer = SmoothedLayer {
        d_in,
        d_out,
        base: StoredWeight::Full { weight: w.clone() },
        factors: ModalityFactors(BTreeMap::new()),
        corrections: BTreeMap::new(),
        modality_weights: BTreeMap::new(),
        profile: *profile,
    };
    if !matches!(method, Method::Mas | Method::MasCmc) {
        let s = unified_vector(method, w, calib, profile, cfg)?;
        layer.base = StoredWeight::from_weight(&w.scale_rows(s.as_slice())?, profile)?;
        layer.factors = ModalityFactors::shared(&s, &modalities);
        return Ok(layer);
    }

    let (mut factors, base_w) = mas_factors(w, calib, profile, method, cfg, layer_seed)?;
    layer.base = base_w;
    let base = layer.base.dequantized();
    for m in modalities.iter().filter(|m| !m.is_text()) {
        match method {
            Method::Mas => {
                let s_m = factors.get(m)?;
                let own = StoredWeight::from_weight(&w.scale_rows(s_m.as_slice())?, profile)?;
                layer.modality_weights.insert(m.clone(), own);
            }
            _ => {
                let x = calib.stacked(m)?;
                let s_m = align_gauge(factors.get(m)?, &x, w, &base)?;
                let xs = x.scale_cols(&s_m.recip())?;
                let whitening = whitening_transform(&xs, cfg.eps)?;
                let delta = weight_residual(&s_m, w, &base)?;
                factors.0.insert(m.clone(), s_m);
                let r = rank_for_ratio(cfg.rank_ratio, d_in, d_out);
                layer
                    .corrections
                    .insert(m.clone(), compensate(&delta, &whitening, r, m.clone())?);
            }
        }
    }
    layer.factors = factors;
    Ok(layer)
}

/// Quantizes every linear layer of `dense` with the chosen method. Layer `k`
/// is calibrated on the full-precision model's inputs to that layer.
pub fn build_pipeline(
    dense: &DenseModel,
    calib: &CalibrationSet,
    profile: &BitProfile,
    method: Method,
    cfg: &PipelineConfig,
) -> Result<ToyModel> {
    let per_layer = calibration_per_layer(dense, calib)?;
    build_pipeline_from_layers(dense, &per_layer, profile, method, cfg)
}

/// As [`build_pipeline`], with the per-layer calibration inputs already
/// computed (or loaded from disk).
pub fn build_pipeline_from_layers(
    dense: &DenseModel,
    per_layer: &[CalibrationSet],
    profile: &BitProfile,
    method: Method,
    cfg: &PipelineConfig,
) -> Result<ToyModel> {
    if per_layer.len() != 2 * dense.depth() {
        return Err(MasqError::dims(
            "build_pipeline",
            format!("{} calibration sets for {} layers", per_layer.len(), 2 * dense.depth()),
        ));
    }
    let weights: Vec<&Matrix> = dense.weights().collect();
    let layers = weights
        .par_iter()
        .zip(per_layer.par_iter())
        .enumerate()
        .map(|(k, (w, c))| build_layer(w, c, profile, method, cfg, layer_seed(cfg, k)))
        .collect::<Result<Vec<_>>>()?;
    let mut it = layers.into_iter();
    let mut blocks = Vec::with_capacity(dense.depth());
    while let (Some(up), Some(down)) = (it.next(), it.next()) {
        blocks.push(QuantBlock { up, down });
    }
    let model = ToyModel {
        d_model: dense.d_model,
        seed: dense.seed,
        blocks,
    };
    model.validate()?;
    Ok(model)
}

/// Rows of every traced layer, grouped by modality.
type Grouped = BTreeMap<ModalityId, Vec<Vec<Vec<f64>>>>;

fn group_trace(trace: &[Matrix], seq: &ModalSequence, into: &mut Grouped) {
    for (m, idx) in seq.groups() {
        let layers = into.entry(m).or_insert_with(|| vec![Vec::new(); trace.len()]);
        for (k, t) in trace.iter().enumerate() {
            layers[k].extend(idx.iter().map(|&i| t.row(i).to_vec()));
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(rows)
}

pub type EvalReport = SqnrReport;

/// Per-modality SQNR and MSE of the quantized model against the reference,
/// at the model output and after every linear layer.
pub fn evaluate(model_q: &ToyModel, model_fp: &DenseModel, eval: &[ModalSequence]) -> Result<EvalReport> {
    if model_q.d_model != model_fp.d_model || model_q.blocks.len() != model_fp.depth() {
        return Err(MasqError::dims(
            "evaluate",
            format!(
                "quantized model is {}-wide x {}, reference is {}-wide x {}",
                model_q.d_model,
                model_q.blocks.len(),
                model_fp.d_model,
                model_fp.depth()
            ),
        ));
    }
    let traces = eval
        .par_iter()
        .map(|seq| {
            Ok((
                dense_forward_traced(model_fp, seq.tokens())?,
                forward_model_traced(model_q, seq)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut refs, mut quants) = (Grouped::new(), Grouped::new());
    for (seq, (r, q)) in eval.iter().zip(&traces) {
        group_trace(r, seq, &mut refs);
        group_trace(q, seq, &mut quants);
    }
    let n_layers = 2 * model_fp.depth();
    let widths: Vec<usize> = model_fp.weights().map(Matrix::cols).collect();
    let mut report = SqnrReport {
        profile: model_q
            .layers()
            .next()
            .map_or_else(|| "none".to_string(), |l| l.profile.label()),
        token_counts: BTreeMap::new(),
        layer_sqnr_db: vec![BTreeMap::new(); n_layers],
        output_sqnr_db: BTreeMap::new(),
        output_mse: BTreeMap::new(),
    };
    for (m, ref_layers) in &refs {
        let q_layers = &quants[m];
        let count = ref_layers.first().map_or(0, Vec::len);
        report.token_counts.insert(m.clone(), count);
        for k in 0..n_layers {
            let a = rows_to_matrix(&ref_layers[k], widths[k])?;
            let b = rows_to_matrix(&q_layers[k], widths[k])?;
            if a.rows() == 0 {
                continue;
            }
            let (db, _) = mean_token_sqnr(&a, &b)?;
            report.layer_sqnr_db[k].insert(m.clone(), db);
            if k + 1 == n_layers {
                report.output_sqnr_db.insert(m.clone(), db);
                let n = a.data().len() as f64;
                report.output_mse.insert(m.clone(), a.sub(&b)?.frobenius_sq() / n);
            }
        }
    }
    Ok(report)
}
