//! Synthetic multimodal activations with modality-specific channel ranges.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DenseModel, ModalSequence};
use crate::error::{MasqError, Result};
use crate::mas::{CalibrationSet, ModalityId};
use crate::numerics::Matrix;

pub const SHARED_PROFILE: f64 = 0.8;
pub const LATENT_RANK: usize = 4;
pub const LATENT_SHARE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub d_model: usize,
    pub depth: usize,
    pub seed: u64,
    /// Overall activation scale per modality.
    pub gammas: BTreeMap<ModalityId, f64>,
    /// Log-space standard deviation of per-channel scales.
    pub range_sigma: f64,
    /// Fraction of the log-scale variance common to all modalities.
    pub shared_profile: f64,
    pub outlier_fraction: f64,
    pub outlier_boost: f64,
    /// Whether every modality boosts the same outlier channels.
    pub shared_outliers: bool,
    /// Number of latent directions per modality; 0 gives independent channels.
    pub latent_rank: usize,
    /// Fraction of each token's energy carried by the latent directions.
    pub latent_share: f64,
    /// Calibration batches per modality.
    pub calib_batches: usize,
    pub calib_tokens: usize,
    pub eval_sequences: usize,
    /// Tokens per modality in each evaluation sequence.
    pub eval_tokens: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            depth: 2,
            seed: 0,
            gammas: BTreeMap::from([
                (ModalityId::text(), 1.0),
                (ModalityId::vision(), 30.0),
                (ModalityId::audio(), 0.3),
            ]),
            range_sigma: 1.0,
            shared_profile: SHARED_PROFILE,
            outlier_fraction: 0.01,
            outlier_boost: 10.0,
            shared_outliers: true,
            latent_rank: LATENT_RANK,
            latent_share: LATENT_SHARE,
            calib_batches: 32,
            calib_tokens: 128,
            eval_sequences: 4,
            eval_tokens: 64,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MasqError::Config(msg.to_string()));
        if self.d_model == 0 {
            return bad("d_model must be positive");
        }
        if self.gammas.is_empty() {
            return bad("at least one modality is required");
        }
        if self.gammas.values().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad("modality scales must be positive");
        }
        if !(self.range_sigma.is_finite() && self.range_sigma >= 0.0) {
            return bad("range_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.shared_profile) || !(0.0..=1.0).contains(&self.latent_share) {
            return bad("shared_profile and latent_share must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(self.outlier_boost.is_finite() && self.outlier_boost > 0.0) {
            return bad("outlier_boost must be positive");
        }
        if self.calib_batches == 0 || self.calib_tokens == 0 {
            return bad("calibration needs at least one batch of one token");
        }
        Ok(())
    }
}

/// Per-modality token distribution: `x = r ∘ (a·z·B + b·ε)`.
#[derive(Debug, Clone, PartialEq)]
struct TokenModel {
    scales: Vec<f64>,
    /// `k x d`, rows normalized to unit mean square.
    basis: Matrix,
    latent: f64,
    noise: f64,
}

impl TokenModel {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let (k, d) = self.basis.shape();
        let mut out = Matrix::zeros(n, d);
        let mut z = vec![0.0; k];
        for t in 0..n {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut *rng));
            let row = out.row_mut(t);
            for (j, x) in row.iter_mut().enumerate() {
                let lat: f64 = z.iter().enumerate().map(|(l, zl)| zl * self.basis[(l, j)]).sum();
                let e: f64 = StandardNormal.sample(&mut *rng);
                *x = self.scales[j] * (self.latent * lat + self.noise * e);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub dense: DenseModel,
    /// Per-channel standard deviation of each modality's model inputs.
    pub channel_scales: BTreeMap<ModalityId, Vec<f64>>,
    /// Inputs to the first layer.
    pub calib: CalibrationSet,
    /// Mixed-modality sequences with shuffled token order.
    pub eval: Vec<ModalSequence>,
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let d = cfg.d_model;
    let dense = DenseModel::random(d, cfg.depth, cfg.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let sigma = cfg.range_sigma;
    let (w_shared, w_own) = (cfg.shared_profile.sqrt(), (1.0 - cfg.shared_profile).sqrt());
    let common: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n_outliers = ((cfg.outlier_fraction * d as f64).ceil() as usize).min(d);
    let pick_outliers = |rng: &mut ChaCha8Rng| {
        let mut channels: Vec<usize> = (0..d).collect();
        channels.shuffle(rng);
        channels.truncate(n_outliers);
        channels
    };
    let shared_outliers = pick_outliers(&mut rng);
    let k = cfg.latent_rank.min(d);
    let (latent, noise) = if k == 0 {
        (0.0, 1.0)
    } else {
        (cfg.latent_share.sqrt() / (k as f64).sqrt(), (1.0 - cfg.latent_share).sqrt())
    };
    let mut models = BTreeMap::new();
    for (m, &gamma) in &cfg.gammas {
        let mut scales: Vec<f64> = common
            .iter()
            .map(|c| {
                let own: f64 = StandardNormal.sample(&mut rng);
                gamma * (sigma * (w_shared * c + w_own * own)).exp()
            })
            .collect();
        let outliers = if cfg.shared_outliers {
            shared_outliers.clone()
        } else {
            pick_outliers(&mut rng)
        };
        for c in outliers {
            scales[c] *= cfg.outlier_boost;
        }
        let basis = Matrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
        models.insert(
            m.clone(),
            TokenModel {
                scales,
                basis,
                latent,
                noise,
            },
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut calib = CalibrationSet::new(d);
    for (m, model) in &models {
        for _ in 0..cfg.calib_batches {
            calib.push(m.clone(), model.sample(cfg.calib_tokens, &mut rng))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut eval = Vec::with_capacity(cfg.eval_sequences);
    for _ in 0..cfg.eval_sequences {
        let mut rows: Vec<(ModalityId, Vec<f64>)> = Vec::new();
        for (m, model) in &models {
            let t = model.sample(cfg.eval_tokens, &mut rng);
            rows.extend(t.row_iter().map(|r| (m.clone(), r.to_vec())));
        }
        rows.shuffle(&mut rng);
        let (tags, data): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let tokens = if data.is_empty() {
            Matrix::zeros(0, d)
        } else {
            Matrix::from_rows(&data)?
        };
        eval.push(ModalSequence::new(tokens, tags)?);
    }

    Ok(Scenario {
        config: cfg.clone(),
        dense,
        channel_scales: models.into_iter().map(|(m, t)| (m, t.scales)).collect(),
        calib,
        eval,
    })
}
