use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use masq_core::analytics::{
    cost_model, dominance_stats, simulate_degradation, theorem1_degradation, theorem2_trial, DegradationVariant,
    Theorem2Trial,
};
use masq_core::io::RunConfig;
use masq_core::mas::ModalityId;
use masq_core::quantizer::BitProfile;
use masq_core::runtime::{
    build_pipeline_from_layers, calibration_per_layer, cmc_rank_sweep, evaluate, generate_scenario, LayerSweep,
    Method, StoredWeight,
};
use masq_core::smoothing::STAT_FLOOR;
use serde::Serialize;

use crate::artifacts::{load_calibration, load_model, load_scenario, save_calibration, save_model, save_scenario};
use crate::report::{write_csv, write_report, Report};

#[derive(Debug, Parser)]
#[command(name = "masq", version, about = "Modality-aware smoothing quantization lab")]
pub struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate model weights, calibration and evaluation tensors.
    GenScenario,
    /// Record every layer's full-precision inputs per modality.
    Calibrate,
    /// Build and store a quantized model.
    Quantize {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        profile: Option<String>,
    },
    /// Compare the stored quantized model with the full-precision one.
    Evaluate,
    /// Per-layer modality dominance and range ratios.
    ReportDominance,
    /// Layer SQNR against correction rank, whitened vs plain SVD.
    SweepCmcRank,
    /// Measured vs predicted SQNR degradation of unified smoothing.
    Theorem1,
    /// Optimality of the whitened low-rank correction.
    Theorem2,
    /// Decoding compute and memory per token.
    CostModel {
        #[arg(long)]
        d: Option<u64>,
        #[arg(long)]
        rank: Option<u64>,
        #[arg(long)]
        modalities: Option<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScenario => "gen-scenario",
            Command::Calibrate => "calibrate",
            Command::Quantize { .. } => "quantize",
            Command::Evaluate => "evaluate",
            Command::ReportDominance => "report-dominance",
            Command::SweepCmcRank => "sweep-cmc-rank",
            Command::Theorem1 => "theorem1",
            Command::Theorem2 => "theorem2",
            Command::CostModel { .. } => "cost-model",
        }
    }
}

/// Loads the config, runs the command, and returns the report path.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Command::Quantize { method, profile } = &cli.command {
        if let Some(m) = method {
            cfg.method = *m;
        }
        if let Some(p) = profile {
            cfg.profile = p.clone();
        }
        cfg.validate()?;
    }
    if let Command::CostModel { d, rank, modalities } = &cli.command {
        cfg.cost_d = d.unwrap_or(cfg.cost_d);
        cfg.cost_rank = rank.unwrap_or(cfg.cost_rank);
        cfg.cost_modalities = modalities.unwrap_or(cfg.cost_modalities);
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let name = cli.command.name();
    match &cli.command {
        Command::GenScenario => gen_scenario(&cfg, &out, name),
        Command::Calibrate => calibrate(&cfg, &out, name),
        Command::Quantize { .. } => quantize(&cfg, &out, name),
        Command::Evaluate => evaluate_cmd(&cfg, &out, name),
        Command::ReportDominance => report_dominance(&cfg, &out, name),
        Command::SweepCmcRank => sweep(&cfg, &out, name),
        Command::Theorem1 => theorem1(&cfg, &out, name),
        Command::Theorem2 => theorem2(&cfg, &out, name),
        Command::CostModel { .. } => cost(&cfg, &out, name),
    }
}

#[derive(Serialize)]
struct ModalitySummary {
    gamma: f64,
    calib_tokens: usize,
    scale_min: f64,
    scale_max: f64,
}

#[derive(Serialize)]
struct GenScenarioBody {
    d_model: usize,
    depth: usize,
    modalities: BTreeMap<ModalityId, ModalitySummary>,
    eval_sequences: usize,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ScaleRow<'a> {
    modality: &'a str,
    channel: usize,
    scale: f64,
}

fn gen_scenario(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = generate_scenario(&cfg.scenario())?;
    let files = save_scenario(out, &sc)?;
    let mut rows = Vec::new();
    let mut modalities = BTreeMap::new();
    for (m, scales) in &sc.channel_scales {
        rows.extend(scales.iter().enumerate().map(|(channel, &scale)| ScaleRow {
            modality: m.as_str(),
            channel,
            scale,
        }));
        modalities.insert(
            m.clone(),
            ModalitySummary {
                gamma: cfg.gammas[m],
                calib_tokens: sc.calib.token_count(m),
                scale_min: scales.iter().copied().fold(f64::INFINITY, f64::min),
                scale_max: scales.iter().copied().fold(0.0, f64::max),
            },
        );
    }
    write_csv(out, "channel_scales.csv", &rows)?;
    let body = GenScenarioBody {
        d_model: sc.dense.d_model,
        depth: sc.dense.depth(),
        modalities,
        eval_sequences: sc.eval.len(),
        files,
    };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct LayerStatsSummary {
    tokens: usize,
    act_max_mean: f64,
    act_max_max: f64,
    weight_max_mean: f64,
}

#[derive(Serialize)]
struct CalibLayer {
    layer: usize,
    d_in: usize,
    d_out: usize,
    modalities: BTreeMap<ModalityId, LayerStatsSummary>,
}

#[derive(Serialize)]
struct CalibrateBody {
    layers: Vec<CalibLayer>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct StatRow<'a> {
    layer: usize,
    modality: &'a str,
    channel: usize,
    act_absmax: f64,
    act_absmean: f64,
    w_absmax: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn calibrate(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = load_scenario(out)?;
    let layers = calibration_per_layer(&sc.dense, &sc.calib)?;
    let files = save_calibration(out, &layers)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (k, (set, w)) in layers.iter().zip(sc.dense.weights()).enumerate() {
        let mut modalities = BTreeMap::new();
        for m in set.modalities() {
            let stats = set.channel_stats(m, w)?;
            rows.extend((0..stats.d_in()).map(|c| StatRow {
                layer: k,
                modality: m.as_str(),
                channel: c,
                act_absmax: stats.act_absmax[c],
                act_absmean: stats.act_absmean[c],
                w_absmax: stats.w_absmax[c],
            }));
            modalities.insert(
                m.clone(),
                LayerStatsSummary {
                    tokens: set.token_count(m),
                    act_max_mean: mean(&stats.act_absmax),
                    act_max_max: stats.act_absmax.iter().copied().fold(0.0, f64::max),
                    weight_max_mean: mean(&stats.w_absmax),
                },
            );
        }
        summary.push(CalibLayer {
            layer: k,
            d_in: w.rows(),
            d_out: w.cols(),
            modalities,
        });
    }
    write_csv(out, "channel_stats.csv", &rows)?;
    let body = CalibrateBody { layers: summary, files };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct CorrectionSummary {
    rank: usize,
    parameters: usize,
    whitening_eps: f64,
}

#[derive(Serialize)]
struct QuantLayer {
    layer: usize,
    d_in: usize,
    d_out: usize,
    base: &'static str,
    own_weights: Vec<ModalityId>,
    corrections: BTreeMap<ModalityId, CorrectionSummary>,
}

#[derive(Serialize)]
struct QuantizeBody {
    method: Method,
    profile: String,
    rank_ratio: f64,
    layers: Vec<QuantLayer>,
    model_file: PathBuf,
}

fn quantize(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = load_scenario(out)?;
    let layers = load_calibration(out, &sc.dense)?;
    let profile = cfg.bit_profile()?;
    let model = build_pipeline_from_layers(&sc.dense, &layers, &profile, cfg.method, &cfg.pipeline())?;
    let model_file = save_model(out, &model, cfg.method, &profile.label())?;
    let layers = model
        .layers()
        .enumerate()
        .map(|(k, l)| QuantLayer {
            layer: k,
            d_in: l.d_in,
            d_out: l.d_out,
            base: match l.base {
                StoredWeight::Quantized { .. } => "quantized",
                StoredWeight::Full { .. } => "full",
            },
            own_weights: l.modality_weights.keys().cloned().collect(),
            corrections: l
                .corrections
                .iter()
                .map(|(m, c)| {
                    (
                        m.clone(),
                        CorrectionSummary {
                            rank: c.rank,
                            parameters: c.parameter_count(),
                            whitening_eps: c.whitening_eps,
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let body = QuantizeBody {
        method: cfg.method,
        profile: profile.label(),
        rank_ratio: cfg.rank_ratio,
        layers,
        model_file,
    };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct EvaluateBody {
    method: Method,
    profile: String,
    token_counts: BTreeMap<ModalityId, usize>,
    output_sqnr_db: BTreeMap<ModalityId, f64>,
    output_mse: BTreeMap<ModalityId, f64>,
    layer_sqnr_db: Vec<BTreeMap<ModalityId, f64>>,
}

#[derive(Serialize)]
struct LayerSqnrRow<'a> {
    modality: &'a str,
    layer: usize,
    sqnr_db: f64,
}

#[derive(Serialize)]
struct OutputRow<'a> {
    modality: &'a str,
    tokens: usize,
    sqnr_db: f64,
    mse: f64,
}

fn evaluate_cmd(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = load_scenario(out)?;
    let (model, manifest) = load_model(out)?;
    let report = evaluate(&model, &sc.dense, &sc.eval)?;
    let mut layer_rows = Vec::new();
    for (k, per) in report.layer_sqnr_db.iter().enumerate() {
        layer_rows.extend(per.iter().map(|(m, &sqnr_db)| LayerSqnrRow {
            modality: m.as_str(),
            layer: k,
            sqnr_db,
        }));
    }
    write_csv(out, "layer_sqnr.csv", &layer_rows)?;
    let output_rows: Vec<OutputRow> = report
        .output_sqnr_db
        .iter()
        .map(|(m, &sqnr_db)| OutputRow {
            modality: m.as_str(),
            tokens: report.token_counts[m],
            sqnr_db,
            mse: report.output_mse[m],
        })
        .collect();
    write_csv(out, "output_sqnr.csv", &output_rows)?;
    let body = EvaluateBody {
        method: manifest.method,
        profile: manifest.profile,
        token_counts: report.token_counts,
        output_sqnr_db: report.output_sqnr_db,
        output_mse: report.output_mse,
        layer_sqnr_db: report.layer_sqnr_db,
    };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct AlphaSummary {
    live_channels: usize,
    min: f64,
    p25: f64,
    median: f64,
    p75: f64,
    max: f64,
}

#[derive(Serialize)]
struct DominanceLayer {
    layer: usize,
    dominant: ModalityId,
    fractions: BTreeMap<ModalityId, f64>,
    tied: f64,
    with_ties_assigned: BTreeMap<ModalityId, f64>,
    /// `R^dominant / R^m` over channels where both ranges are non-zero.
    alpha: BTreeMap<ModalityId, AlphaSummary>,
}

#[derive(Serialize)]
struct DominanceBody {
    layers: Vec<DominanceLayer>,
}

#[derive(Serialize)]
struct FractionRow {
    layer: usize,
    modality: String,
    fraction: f64,
    with_ties: f64,
}

#[derive(Serialize)]
struct AlphaRow {
    layer: usize,
    dominant: String,
    modality: String,
    channel: usize,
    alpha: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn report_dominance(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = generate_scenario(&cfg.scenario())?;
    let layers = calibration_per_layer(&sc.dense, &sc.calib)?;
    let mut body = DominanceBody { layers: Vec::new() };
    let mut fraction_rows = Vec::new();
    let mut alpha_rows = Vec::new();
    for (k, set) in layers.iter().enumerate() {
        let stats = dominance_stats(set)?;
        let ties = stats.with_ties_assigned();
        let dominant = stats
            .fractions
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(m, _)| m.clone())
            .context("no modalities")?;
        for (m, &f) in &stats.fractions {
            fraction_rows.push(FractionRow {
                layer: k,
                modality: m.to_string(),
                fraction: f,
                with_ties: ties[m],
            });
        }
        let rd = set.range(&dominant)?.to_vec();
        let mut alpha = BTreeMap::new();
        for m in set.modalities().filter(|m| **m != dominant) {
            let mut values = Vec::new();
            for (c, (a, b)) in rd.iter().zip(set.range(m)?).enumerate() {
                if *a > STAT_FLOOR && *b > STAT_FLOOR {
                    values.push(a / b);
                    alpha_rows.push(AlphaRow {
                        layer: k,
                        dominant: dominant.to_string(),
                        modality: m.to_string(),
                        channel: c,
                        alpha: a / b,
                    });
                }
            }
            values.sort_by(f64::total_cmp);
            alpha.insert(
                m.clone(),
                AlphaSummary {
                    live_channels: values.len(),
                    min: quantile(&values, 0.0),
                    p25: quantile(&values, 0.25),
                    median: quantile(&values, 0.5),
                    p75: quantile(&values, 0.75),
                    max: quantile(&values, 1.0),
                },
            );
        }
        body.layers.push(DominanceLayer {
            layer: k,
            dominant,
            fractions: stats.fractions.clone(),
            tied: stats.tied,
            with_ties_assigned: ties,
            alpha,
        });
    }
    write_csv(out, "dominance.csv", &fraction_rows)?;
    write_csv(out, "alpha.csv", &alpha_rows)?;
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct SweepBody {
    profile: String,
    ratios: Vec<f64>,
    rows: Vec<LayerSweep>,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    layer: usize,
    modality: &'a str,
    ratio: f64,
    rank: usize,
    whitened_db: f64,
    naive_db: f64,
    mas_db: f64,
}

fn sweep(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let sc = generate_scenario(&cfg.scenario())?;
    let layers = calibration_per_layer(&sc.dense, &sc.calib)?;
    let profile: BitProfile = cfg.bit_profile()?;
    let rows = cmc_rank_sweep(&sc.dense, &layers, &profile, &cfg.pipeline(), &cfg.sweep_ratios)?;
    let csv_rows: Vec<SweepRow> = rows
        .iter()
        .flat_map(|r| {
            r.points.iter().map(move |p| SweepRow {
                layer: r.layer,
                modality: r.modality.as_str(),
                ratio: p.ratio,
                rank: p.rank,
                whitened_db: p.whitened_db,
                naive_db: p.naive_db,
                mas_db: r.mas_db,
            })
        })
        .collect();
    write_csv(out, "cmc_rank_sweep.csv", &csv_rows)?;
    let body = SweepBody {
        profile: profile.label(),
        ratios: cfg.sweep_ratios.clone(),
        rows,
    };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct Theorem1Row {
    pattern: String,
    d: usize,
    predicted_db: f64,
    printed_db: f64,
    empirical_db: f64,
    own_db: f64,
    unified_db: f64,
}

#[derive(Serialize)]
struct Theorem1Body {
    bits: u8,
    tokens: usize,
    jitter: f64,
    rows: Vec<Theorem1Row>,
}

fn theorem1(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for (i, pattern) in cfg.theorem1_patterns.iter().enumerate() {
        for (j, &d) in cfg.theorem1_dims.iter().enumerate() {
            let seed = cfg.seed.wrapping_add((i * cfg.theorem1_dims.len() + j) as u64);
            let alpha = pattern.alphas(d, seed)?;
            let m = simulate_degradation(&alpha, cfg.theorem1_bits, cfg.theorem1_tokens, cfg.theorem1_jitter, seed)?;
            rows.push(Theorem1Row {
                pattern: pattern.to_string(),
                d,
                predicted_db: m.predicted_db,
                printed_db: theorem1_degradation(&alpha, DegradationVariant::Printed)?,
                empirical_db: m.empirical_db,
                own_db: m.own_db,
                unified_db: m.unified_db,
            });
        }
    }
    write_csv(out, "theorem1.csv", &rows)?;
    let body = Theorem1Body {
        bits: cfg.theorem1_bits,
        tokens: cfg.theorem1_tokens,
        jitter: cfg.theorem1_jitter,
        rows,
    };
    write_report(out, &Report::new(name, cfg, body))
}

#[derive(Serialize)]
struct Theorem2Body {
    rows: Vec<Theorem2Trial>,
}

fn theorem2(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let rows = (0..cfg.theorem2_instances)
        .map(|i| {
            theorem2_trial(
                cfg.seed.wrapping_add(i as u64),
                cfg.theorem2_d_in,
                cfg.theorem2_d_out,
                cfg.theorem2_tokens,
                cfg.theorem2_rank,
                cfg.theorem2_candidates,
            )
        })
        .collect::<masq_core::Result<Vec<_>>>()?;
    write_csv(out, "theorem2.csv", &rows)?;
    write_report(out, &Report::new(name, cfg, Theorem2Body { rows }))
}

#[derive(Serialize)]
struct CostRow {
    modality: &'static str,
    compute: u64,
    memory: u64,
}

#[derive(Serialize)]
struct CostBody {
    d: u64,
    rank: u64,
    modalities: u64,
    rows: Vec<CostRow>,
}

fn cost(cfg: &RunConfig, out: &Path, name: &str) -> Result<PathBuf> {
    let c = cost_model(cfg.cost_d, cfg.cost_rank, cfg.cost_modalities);
    let rows = vec![
        CostRow {
            modality: "text",
            compute: c.text_compute,
            memory: c.text_memory,
        },
        CostRow {
            modality: "others",
            compute: c.other_compute,
            memory: c.other_memory,
        },
    ];
    write_csv(out, "cost_model.csv", &rows)?;
    let body = CostBody {
        d: c.d,
        rank: c.rank,
        modalities: c.extra_modalities,
        rows,
    };
    write_report(out, &Report::new(name, cfg, body))
}
