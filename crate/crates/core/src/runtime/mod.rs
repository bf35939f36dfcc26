//! Modality-routed quantized inference over a small MLP stack.
//!
//! Each block is `Linear(D→4D) → ReLU → Linear(4D→D)`. In a quantized layer
//! every token is smoothed with its own modality's factors, activation
//! quantized, and multiplied by the stored base weight `Q(S_t·W)`; non-text
//! tokens additionally take the full-precision path `X_m·S_m⁻¹·L1·L2`.

mod pipeline;
mod scenario;
mod diagnostics;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use pipeline::{
    build_pipeline, build_pipeline_from_layers, calibration_per_layer, evaluate, EvalReport, Method, PipelineConfig,
};
pub use scenario::{generate_scenario, Scenario, ScenarioConfig};
pub use diagnostics::{cmc_rank_sweep, mas_effectiveness, LayerEffect, LayerSweep, ModalityEffect, SweepPoint};

use crate::cmc::LowRankCorrection;
use crate::error::{MasqError, Result};
use crate::mas::{ModalityFactors, ModalityId};
use crate::numerics::Matrix;
use crate::quantizer::{quantize_weight_codes, BitProfile, QuantizedTensor};

/// Tokens with one modality tag per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalSequence {
    tokens: Matrix,
    tags: Vec<ModalityId>,
}

impl ModalSequence {
    pub fn new(tokens: Matrix, tags: Vec<ModalityId>) -> Result<Self> {
        if tags.len() != tokens.rows() {
            return Err(MasqError::dims(
                "ModalSequence::new",
                format!("{} tags for {} tokens", tags.len(), tokens.rows()),
            ));
        }
        Ok(Self { tokens, tags })
    }

    /// A sequence whose tokens all carry one tag.
    pub fn single(tokens: Matrix, modality: ModalityId) -> Self {
        let tags = vec![modality; tokens.rows()];
        Self { tokens, tags }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn tags(&self) -> &[ModalityId] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Row indices per modality, in original order.
    pub fn groups(&self) -> BTreeMap<ModalityId, Vec<usize>> {
        let mut g: BTreeMap<ModalityId, Vec<usize>> = BTreeMap::new();
        for (i, m) in self.tags.iter().enumerate() {
            g.entry(m.clone()).or_default().push(i);
        }
        g
    }

    /// Same tags, new token values (e.g. the next layer's input).
    pub fn with_tokens(&self, tokens: Matrix) -> Result<Self> {
        Self::new(tokens, self.tags.clone())
    }
}

/// A weight either kept as integer codes or in full precision (16-bit
/// profiles, where quantization is skipped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StoredWeight {
    Quantized { tensor: QuantizedTensor },
    Full { weight: Matrix },
}

impl StoredWeight {
    pub fn from_weight(w: &Matrix, profile: &BitProfile) -> Result<Self> {
        if profile.weight.is_lossless() {
            return Ok(StoredWeight::Full { weight: w.clone() });
        }
        Ok(StoredWeight::Quantized {
            tensor: quantize_weight_codes(w, &profile.weight)?,
        })
    }

    /// `D_in x D_out` weight used in the product.
    pub fn dequantized(&self) -> Matrix {
        match self {
            StoredWeight::Quantized { tensor } => tensor.dequantize().transpose(),
            StoredWeight::Full { weight } => weight.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredWeight::Quantized { tensor } => (tensor.cols, tensor.rows),
            StoredWeight::Full { weight } => weight.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// `Q(S_t·W)`, shared by every modality without its own weight.
    pub base: StoredWeight,
    pub factors: ModalityFactors,
    /// Low-rank corrections for non-text modalities.
    pub corrections: BTreeMap<ModalityId, LowRankCorrection>,
    /// Separately stored `Q(S_m·W)` for modalities that bypass the base.
    pub modality_weights: BTreeMap<ModalityId, StoredWeight>,
    pub profile: BitProfile,
}

impl SmoothedLayer {
    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, shape: (usize, usize)| {
            if shape != (self.d_in, self.d_out) {
                return Err(MasqError::dims(
                    "SmoothedLayer",
                    format!("{what} is {shape:?}, layer is {}x{}", self.d_in, self.d_out),
                ));
            }
            Ok(())
        };
        check("base", self.base.shape())?;
        for (m, w) in &self.modality_weights {
            check(m.as_str(), w.shape())?;
        }
        for (m, s) in self.factors.iter() {
            if s.len() != self.d_in {
                return Err(MasqError::dims(
                    "SmoothedLayer",
                    format!("factors for {m} have {} entries", s.len()),
                ));
            }
        }
        for (m, c) in &self.corrections {
            if m.is_text() {
                return Err(MasqError::invalid("SmoothedLayer", "text never carries a correction"));
            }
            if c.l1.rows() != self.d_in || c.l2.cols() != self.d_out {
                return Err(MasqError::dims("SmoothedLayer", format!("correction for {m}")));
            }
        }
        Ok(())
    }
}

/// Routes each token through its modality's smoothing, weight and correction.
pub fn forward_layer(layer: &SmoothedLayer, seq: &ModalSequence) -> Result<Matrix> {
    if seq.tokens.cols() != layer.d_in {
        return Err(MasqError::dims(
            "forward_layer",
            format!("tokens have {} channels, layer expects {}", seq.tokens.cols(), layer.d_in),
        ));
    }
    let base = layer.base.dequantized();
    let mut out = Matrix::zeros(seq.len(), layer.d_out);
    for (m, idx) in seq.groups() {
        let s = layer
            .factors
            .0
            .get(&m)
            .ok_or_else(|| MasqError::UnknownModality(m.to_string()))?;
        let xs = seq.tokens.select_rows(&idx).scale_cols(&s.recip())?;
        let own;
        let w = match layer.modality_weights.get(&m) {
            Some(sw) => {
                own = sw.dequantized();
                &own
            }
            None => &base,
        };
        let mut y = layer.profile.quantize_activation(&xs)?.matmul(w)?;
        if let Some(c) = layer.corrections.get(&m) {
            y = y.add(&c.apply(&xs)?)?;
        }
        for (k, &row) in idx.iter().enumerate() {
            out.row_mut(row).copy_from_slice(y.row(k));
        }
    }
    Ok(out)
}

fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBlock {
    pub up: SmoothedLayer,
    pub down: SmoothedLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub d_model: usize,
    pub seed: u64,
    pub blocks: Vec<QuantBlock>,
}

impl ToyModel {
    pub fn layers(&self) -> impl Iterator<Item = &SmoothedLayer> {
        self.blocks.iter().flat_map(|b| [&b.up, &b.down])
    }

    pub fn validate(&self) -> Result<()> {
        let mut d = self.d_model;
        for layer in self.layers() {
            layer.validate()?;
            if layer.d_in != d {
                return Err(MasqError::dims(
                    "ToyModel",
                    format!("layer expects {} inputs after a {d}-wide layer", layer.d_in),
                ));
            }
            d = layer.d_out;
        }
        if d != self.d_model {
            return Err(MasqError::dims("ToyModel", "last layer does not return to d_model"));
        }
        Ok(())
    }
}

/// Full-precision weights of the same architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseModel {
    pub d_model: usize,
    pub seed: u64,
    /// `(up, down)` per block, `D x 4D` and `4D x D`.
    pub blocks: Vec<(Matrix, Matrix)>,
}

impl DenseModel {
    /// Standard normal weights scaled by `1/sqrt(D_in)`.
    pub fn random(d_model: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |r: usize, c: usize| {
            let scale = 1.0 / (r as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let blocks = (0..depth)
            .map(|_| (gen(d_model, 4 * d_model), gen(4 * d_model, d_model)))
            .collect();
        Self {
            d_model,
            seed,
            blocks,
        }
    }

    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.blocks.iter().flat_map(|(u, d)| [u, d])
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Output of every linear layer, in execution order; the last entry is the
/// model output.
pub fn dense_forward_traced(model: &DenseModel, x: &Matrix) -> Result<Vec<Matrix>> {
    let mut trace = Vec::with_capacity(2 * model.depth());
    let mut h = x.clone();
    for (up, down) in &model.blocks {
        let a = h.matmul(up)?;
        h = relu(&a).matmul(down)?;
        trace.push(a);
        trace.push(h.clone());
    }
    Ok(trace)
}

pub fn dense_forward(model: &DenseModel, x: &Matrix) -> Result<Matrix> {
    Ok(dense_forward_traced(model, x)?.pop().unwrap_or_else(|| x.clone()))
}

pub fn forward_model_traced(model: &ToyModel, seq: &ModalSequence) -> Result<Vec<Matrix>> {
    let mut trace = Vec::with_capacity(2 * model.blocks.len());
    let mut cur = seq.clone();
    for block in &model.blocks {
        let a = forward_layer(&block.up, &cur)?;
        let h = forward_layer(&block.down, &cur.with_tokens(relu(&a))?)?;
        trace.push(a);
        cur = cur.with_tokens(h.clone())?;
        trace.push(h);
    }
    Ok(trace)
}

pub fn forward_model(model: &ToyModel, seq: &ModalSequence) -> Result<Matrix> {
    Ok(forward_model_traced(model, seq)?
        .pop()
        .unwrap_or_else(|| seq.tokens.clone()))
}
