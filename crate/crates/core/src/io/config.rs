//! TOML run configuration with a flat key set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{AlphaPattern, DEFAULT_FLAT_JITTER};
use crate::cmc::{WhiteningEps, DEFAULT_RANK_RATIO, DEFAULT_RELATIVE_EPS};
use crate::error::{MasqError, Result};
use crate::mas::{MasConfig, ModalityId, Optimizer};
use crate::quantizer::BitProfile;
use crate::runtime::{Method, PipelineConfig, ScenarioConfig};
use crate::smoothing::{default_awq_grid, DEFAULT_BETA};

/// Environment variable that replaces `seed` when set.
pub const SEED_ENV: &str = "MASQ_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsMode {
    Relative,
    Absolute,
}

/// Every key is optional; missing keys take the defaults below. Unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model and scenario
    pub d_model: usize,
    pub depth: usize,
    pub seed: u64,
    pub gammas: BTreeMap<ModalityId, f64>,
    pub range_sigma: f64,
    pub shared_profile: f64,
    pub outlier_fraction: f64,
    pub outlier_boost: f64,
    pub shared_outliers: bool,
    pub latent_rank: usize,
    pub latent_share: f64,
    pub calib_batches: usize,
    pub calib_tokens: usize,
    pub eval_sequences: usize,
    pub eval_tokens: usize,

    // quantization
    pub profile: String,
    pub method: Method,
    pub beta: f64,
    pub awq_grid: Vec<f64>,
    pub lambda: BTreeMap<ModalityId, f64>,
    pub epochs: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub rank_ratio: f64,
    pub eps: f64,
    pub eps_mode: EpsMode,

    // analytics
    pub sweep_ratios: Vec<f64>,
    pub theorem1_dims: Vec<usize>,
    pub theorem1_patterns: Vec<AlphaPattern>,
    pub theorem1_tokens: usize,
    pub theorem1_jitter: f64,
    pub theorem1_bits: u8,
    pub theorem2_instances: usize,
    pub theorem2_d_in: usize,
    pub theorem2_d_out: usize,
    pub theorem2_tokens: usize,
    pub theorem2_rank: usize,
    pub theorem2_candidates: usize,
    pub cost_d: u64,
    pub cost_rank: u64,
    pub cost_modalities: u64,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        let mas = MasConfig::default();
        Self {
            d_model: scenario.d_model,
            depth: scenario.depth,
            seed: scenario.seed,
            gammas: scenario.gammas,
            range_sigma: scenario.range_sigma,
            shared_profile: scenario.shared_profile,
            outlier_fraction: scenario.outlier_fraction,
            outlier_boost: scenario.outlier_boost,
            shared_outliers: scenario.shared_outliers,
            latent_rank: scenario.latent_rank,
            latent_share: scenario.latent_share,
            calib_batches: scenario.calib_batches,
            calib_tokens: scenario.calib_tokens,
            eval_sequences: scenario.eval_sequences,
            eval_tokens: scenario.eval_tokens,
            profile: "W4A8".to_string(),
            method: Method::MasCmc,
            beta: DEFAULT_BETA,
            awq_grid: default_awq_grid(),
            lambda: mas.lambda,
            epochs: mas.epochs,
            step_size: mas.step_size,
            optimizer: mas.optimizer,
            rank_ratio: DEFAULT_RANK_RATIO,
            eps: DEFAULT_RELATIVE_EPS,
            eps_mode: EpsMode::Relative,
            sweep_ratios: vec![0.0, 0.02, 0.04, 0.08, 0.1, 0.16, 0.25, 0.5],
            theorem1_dims: vec![64, 256],
            theorem1_patterns: vec![
                AlphaPattern::Constant(2.0),
                AlphaPattern::Constant(10.0),
                AlphaPattern::TwoLevel(1.0, 10.0),
                AlphaPattern::LogNormal(1.0),
            ],
            theorem1_tokens: 2000,
            theorem1_jitter: DEFAULT_FLAT_JITTER,
            theorem1_bits: 8,
            theorem2_instances: 20,
            theorem2_d_in: 48,
            theorem2_d_out: 32,
            theorem2_tokens: 128,
            theorem2_rank: 4,
            theorem2_candidates: 1000,
            cost_d: 4096,
            cost_rank: 328,
            cost_modalities: 2,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MasqError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults) and applies `MASQ_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| MasqError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| MasqError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MasqError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MasqError::Config(msg));
        self.scenario().validate()?;
        self.bit_profile()?;
        let pipeline = self.pipeline();
        pipeline.mas.validate(self.gammas.keys())?;
        if let Some(m) = self.lambda.keys().find(|m| !self.gammas.contains_key(*m)) {
            return bad(format!("lambda given for `{m}`, which has no gamma"));
        }
        if !(0.0..=1.0).contains(&self.rank_ratio) {
            return bad("rank_ratio must lie in [0, 1]".into());
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad("eps must be finite and >= 0".into());
        }
        if !(self.beta.is_finite() && (0.0..=1.0).contains(&self.beta)) {
            return bad("beta must lie in [0, 1]".into());
        }
        if self.awq_grid.is_empty() || self.awq_grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad("awq_grid must be non-empty with values in [0, 1]".into());
        }
        if self.sweep_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("sweep_ratios must lie in [0, 1]".into());
        }
        if self.theorem1_dims.contains(&0) || self.theorem1_tokens == 0 {
            return bad("theorem1_dims and theorem1_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.theorem1_jitter) {
            return bad("theorem1_jitter must lie in [0, 1)".into());
        }
        if !(2..=16).contains(&self.theorem1_bits) {
            return bad("theorem1_bits must lie in 2..=16".into());
        }
        if self.theorem2_tokens < 2 * self.theorem2_d_in {
            return bad("theorem2_tokens must be at least 2 * theorem2_d_in".into());
        }
        if self.theorem2_rank > self.theorem2_d_in.min(self.theorem2_d_out) {
            return bad("theorem2_rank exceeds min(theorem2_d_in, theorem2_d_out)".into());
        }
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            d_model: self.d_model,
            depth: self.depth,
            seed: self.seed,
            gammas: self.gammas.clone(),
            range_sigma: self.range_sigma,
            shared_profile: self.shared_profile,
            outlier_fraction: self.outlier_fraction,
            outlier_boost: self.outlier_boost,
            shared_outliers: self.shared_outliers,
            latent_rank: self.latent_rank,
            latent_share: self.latent_share,
            calib_batches: self.calib_batches,
            calib_tokens: self.calib_tokens,
            eval_sequences: self.eval_sequences,
            eval_tokens: self.eval_tokens,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mas: MasConfig {
                lambda: self.lambda.clone(),
                epochs: self.epochs,
                step_size: self.step_size,
                optimizer: self.optimizer,
                seed: self.seed,
            },
            rank_ratio: self.rank_ratio,
            eps: match self.eps_mode {
                EpsMode::Relative => WhiteningEps::Relative(self.eps),
                EpsMode::Absolute => WhiteningEps::Absolute(self.eps),
            },
            beta: self.beta,
            awq_grid: self.awq_grid.clone(),
        }
    }

    pub fn bit_profile(&self) -> Result<BitProfile> {
        self.profile.parse()
    }
}
