use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mae_against, CalibrationSet, MasConfig, ModalityFactors, ModalityId, Optimizer};
use crate::error::{MasqError, Result};
use crate::numerics::Matrix;
use crate::quantizer::{compute_qparams, fake_quantize, unclamped_mask, BitProfile, QuantScheme};
use crate::smoothing::SmoothingVector;

const MAX_REJECTIONS: usize = 10;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Objective values seen by [`optimize_factors_traced`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeTrace {
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Per modality: objective after each epoch (before best-so-far selection).
    pub epoch_losses: BTreeMap<ModalityId, Vec<f64>>,
    pub rejected_steps: usize,
}

/// `Σ_m λ_m · MAE_m(s^m)` over every calibration modality with λ_m > 0.
pub fn weighted_objective(
    factors: &ModalityFactors,
    calib: &CalibrationSet,
    w: &Matrix,
    profile: &BitProfile,
    cfg: &MasConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for m in calib.modalities() {
        let lambda = cfg.lambda_for(m);
        if lambda > 0.0 {
            let data = ModalityData::new(calib, m, w)?;
            total += lambda * data.full_loss(factors.get(m)?, w, profile)?;
        }
    }
    Ok(total)
}

pub fn optimize_factors(
    init: &ModalityFactors,
    calib: &CalibrationSet,
    w: &Matrix,
    profile: &BitProfile,
    cfg: &MasConfig,
) -> Result<ModalityFactors> {
    optimize_factors_traced(init, calib, w, profile, cfg).map(|(f, _)| f)
}

/// Refines each modality's factors in log space with straight-through
/// gradients of the MAE objective.
///
/// The objective is separable, so every modality is optimized on its own
/// data with its own RNG stream (derived from `cfg.seed` and the modality
/// name). The full-data loss is evaluated at the start and after every epoch;
/// the best iterate is returned, so the weighted objective never increases.
pub fn optimize_factors_traced(
    init: &ModalityFactors,
    calib: &CalibrationSet,
    w: &Matrix,
    profile: &BitProfile,
    cfg: &MasConfig,
) -> Result<(ModalityFactors, OptimizeTrace)> {
    cfg.validate(calib.modalities())?;
    let mut out = init.0.clone();
    let mut epoch_losses = BTreeMap::new();
    let mut initial_objective = 0.0;
    let mut final_objective = 0.0;
    let mut rejected_steps = 0;
    for m in calib.modalities() {
        let start = init.get(m)?;
        if start.len() != w.rows() {
            return Err(MasqError::dims("optimize_factors", "factor length differs from D_in"));
        }
        let lambda = cfg.lambda_for(m);
        if lambda == 0.0 {
            continue;
        }
        let data = ModalityData::new(calib, m, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash(m.as_str()));
        let run = descend(start, &[(&data, 1.0)], w, profile, cfg, &mut rng)?;
        initial_objective += lambda * run.initial;
        final_objective += lambda * run.best_loss;
        rejected_steps += run.rejected;
        epoch_losses.insert(m.clone(), run.epoch_losses);
        out.insert(m.clone(), run.best);
    }
    Ok((
        ModalityFactors(out),
        OptimizeTrace {
            initial_objective,
            final_objective,
            epoch_losses,
            rejected_steps,
        },
    ))
}

/// Learns one smoothing vector shared by all modalities against the same
/// weighted objective (the single-factor counterpart of [`optimize_factors`]).
pub fn optimize_shared(
    init: &SmoothingVector,
    calib: &CalibrationSet,
    w: &Matrix,
    profile: &BitProfile,
    cfg: &MasConfig,
) -> Result<SmoothingVector> {
    cfg.validate(calib.modalities())?;
    let mut datas = Vec::new();
    for m in calib.modalities() {
        let lambda = cfg.lambda_for(m);
        if lambda > 0.0 {
            datas.push((ModalityData::new(calib, m, w)?, lambda));
        }
    }
    let refs: Vec<(&ModalityData, f64)> = datas.iter().map(|(d, l)| (d, *l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash("shared"));
    Ok(descend(init, &refs, w, profile, cfg, &mut rng)?.best)
}

struct ModalityData {
    batches: Vec<(Matrix, Matrix)>,
    full: Matrix,
    full_target: Matrix,
    /// Mean absolute value of the full-precision output.
    target_scale: f64,
}

impl ModalityData {
    fn new(calib: &CalibrationSet, m: &ModalityId, w: &Matrix) -> Result<Self> {
        let batches = calib
            .batches(m)?
            .iter()
            .map(|b| Ok((b.clone(), b.matmul(w)?)))
            .collect::<Result<Vec<_>>>()?;
        let full = calib.stacked(m)?;
        let full_target = full.matmul(w)?;
        let target_scale = full_target.data().iter().map(|v| v.abs()).sum::<f64>()
            / full_target.data().len().max(1) as f64;
        Ok(Self {
            batches,
            full,
            full_target,
            target_scale,
        })
    }

    fn full_loss(&self, s: &SmoothingVector, w: &Matrix, profile: &BitProfile) -> Result<f64> {
        mae_against(s, &self.full, w, &self.full_target, profile)
    }
}

struct Descent {
    best: SmoothingVector,
    best_loss: f64,
    initial: f64,
    epoch_losses: Vec<f64>,
    rejected: usize,
}

fn descend(
    start: &SmoothingVector,
    datas: &[(&ModalityData, f64)],
    w: &Matrix,
    profile: &BitProfile,
    cfg: &MasConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Descent> {
    let objective = |s: &SmoothingVector| -> Result<f64> {
        let mut total = 0.0;
        for (d, lambda) in datas {
            total += lambda * d.full_loss(s, w, profile)?;
        }
        Ok(total)
    };
    let initial = objective(start)?;
    // Improvements smaller than this are rounding noise, not progress.
    let noise_floor: f64 = 1e-12
        * datas
            .iter()
            .map(|(d, lambda)| lambda * d.target_scale)
            .sum::<f64>();
    let mut run = Descent {
        best: start.clone(),
        best_loss: initial,
        initial,
        epoch_losses: Vec::new(),
        rejected: 0,
    };
    let n_batches = datas.iter().map(|(d, _)| d.batches.len()).max().unwrap_or(0);
    if cfg.epochs == 0 || n_batches == 0 {
        return Ok(run);
    }

    let dim = start.len();
    let mut theta: Vec<f64> = start.as_slice().iter().map(|s| s.ln()).collect();
    let mut accepted = theta.clone();
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut t = 0i32;
    let mut lr = cfg.step_size;
    let mut consecutive = 0;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_batches).collect();
        order.shuffle(rng);
        for &b in &order {
            let grad = match SmoothingVector::new(theta.iter().map(|v| v.exp()).collect()) {
                Ok(s) => batch_gradient(&s, datas, b, w, profile)?,
                Err(_) => None,
            };
            let Some(grad) = grad else {
                run.rejected += 1;
                consecutive += 1;
                theta.clone_from(&accepted);
                lr *= 0.5;
                if consecutive >= MAX_REJECTIONS {
                    return Ok(run);
                }
                continue;
            };
            consecutive = 0;
            accepted.clone_from(&theta);
            t += 1;
            match cfg.optimizer {
                Optimizer::SignDescent => {
                    for (th, g) in theta.iter_mut().zip(&grad) {
                        *th -= lr * sign(*g);
                    }
                }
                Optimizer::AdaptiveMoment => {
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..dim {
                        m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * grad[i];
                        m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                        theta[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let loss = SmoothingVector::new(theta.iter().map(|v| v.exp()).collect())
            .ok()
            .map(|s| objective(&s).map(|l| (s, l)))
            .transpose()?;
        match loss {
            Some((s, l)) if l.is_finite() => {
                run.epoch_losses.push(l);
                if l < run.best_loss - noise_floor {
                    run.best = s;
                    run.best_loss = l;
                }
            }
            _ => run.epoch_losses.push(f64::NAN),
        }
    }
    Ok(run)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted straight-through gradient w.r.t. `θ = ln s` on batch `b` of every
/// modality (batch indices wrap for modalities with fewer batches). Returns
/// `None` when the loss or gradient is not finite.
fn batch_gradient(
    s: &SmoothingVector,
    datas: &[(&ModalityData, f64)],
    b: usize,
    w: &Matrix,
    profile: &BitProfile,
) -> Result<Option<Vec<f64>>> {
    let mut grad = vec![0.0; s.len()];
    for (d, lambda) in datas {
        let (x, target) = &d.batches[b % d.batches.len()];
        let Some((loss, g)) = loss_and_grad(s, x, w, target, profile)? else {
            return Ok(None);
        };
        if !loss.is_finite() {
            return Ok(None);
        }
        grad.iter_mut().zip(&g).for_each(|(a, v)| *a += lambda * v);
    }
    Ok(grad.iter().all(|g| g.is_finite()).then_some(grad))
}

/// Fake-quantizes `x` (rows are groups) and returns the straight-through mask.
fn quantize_with_mask(x: &Matrix, scheme: &QuantScheme) -> Result<(Matrix, Vec<bool>)> {
    if scheme.is_lossless() {
        return Ok((x.clone(), vec![true; x.rows() * x.cols()]));
    }
    let params = compute_qparams(x, scheme)?;
    Ok((fake_quantize(x, &params, scheme)?, unclamped_mask(x, &params, scheme)?))
}

/// MAE of `Q(X/s)·Q(sW)` against `target` and its straight-through gradient
/// with respect to `ln s`.
pub(crate) fn loss_and_grad(
    s: &SmoothingVector,
    x: &Matrix,
    w: &Matrix,
    target: &Matrix,
    profile: &BitProfile,
) -> Result<Option<(f64, Vec<f64>)>> {
    let a = x.scale_cols(&s.recip())?;
    let bt = w.scale_rows(s.as_slice())?.transpose();
    if a.data().iter().chain(bt.data()).any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let (qa, mask_a) = quantize_with_mask(&a, &profile.activation)?;
    // Weight groups are output channels, i.e. rows of the transposed weight.
    let (qbt, mask_bt) = quantize_with_mask(&bt, &profile.weight)?;
    let qb = qbt.transpose();
    let y = qa.matmul(&qb)?;
    let n = (y.rows() * y.cols()).max(1) as f64;
    let mut loss = 0.0;
    let g = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
        let e = y[(r, c)] - target[(r, c)];
        loss += e.abs();
        sign(e) / n
    });
    loss /= n;

    // dL/dA = (G · Q(B)ᵀ) masked; dA_ti/dθ_i = −A_ti.
    let ga = g.matmul(&qbt)?;
    // dL/dBᵀ = (Gᵀ · Q(A)) masked; dB_ij/dθ_i = B_ij.
    let gbt = g.transpose().matmul(&qa)?;
    let mut grad = vec![0.0; s.len()];
    for t in 0..a.rows() {
        for (i, gi) in grad.iter_mut().enumerate() {
            if mask_a[t * a.cols() + i] {
                *gi -= ga[(t, i)] * a[(t, i)];
            }
        }
    }
    for j in 0..bt.rows() {
        for (i, gi) in grad.iter_mut().enumerate() {
            if mask_bt[j * bt.cols() + i] {
                *gi += gbt[(j, i)] * bt[(j, i)];
            }
        }
    }
    Ok(Some((loss, grad)))
}

/// FNV-1a, used to derive per-modality RNG streams independent of std's hasher.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mas::{init_modality_factors, mae_loss};
    use crate::smoothing::{collect_channel_stats, unified_factors};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Two modalities with a 30x range gap and a handful of outlier channels.
    fn two_modality_layer(seed: u64) -> (CalibrationSet, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 16;
        let w = gaussian(d, 12, &mut rng).scale(0.25);
        let ranges_t: Vec<f64> = (0..d).map(|i| if i % 7 == 0 { 8.0 } else { rng.random_range(0.5..2.0) }).collect();
        let ranges_v: Vec<f64> = (0..d).map(|_| 30.0 * rng.random_range(0.3..3.0)).collect();
        let mut calib = CalibrationSet::new(d);
        for _ in 0..4 {
            calib.push(ModalityId::text(), gaussian(16, d, &mut rng).scale_cols(&ranges_t).unwrap()).unwrap();
            calib.push(ModalityId::vision(), gaussian(16, d, &mut rng).scale_cols(&ranges_v).unwrap()).unwrap();
        }
        (calib, w)
    }

    #[test]
    fn gradient_matches_finite_differences_without_rounding() {
        // With lossless quantization the loss is invariant to s, so the
        // straight-through gradient must vanish.
        let (calib, w) = two_modality_layer(1);
        let x = &calib.batches(&ModalityId::text()).unwrap()[0];
        let s = SmoothingVector::new((0..16).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let target = x.matmul(&w).unwrap();
        let (_, g) = loss_and_grad(&s, x, &w, &target, &BitProfile::new(16, 16).unwrap())
            .unwrap()
            .unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn straight_through_gradient_matches_surrogate_derivative() {
        // Freeze the rounding decisions: Q(A) = A + Ea, Q(B) = B + Eb with the
        // errors held fixed. The STE gradient is the exact derivative of that
        // surrogate, which we check by central differences.
        let (calib, w) = two_modality_layer(2);
        let x = &calib.batches(&ModalityId::vision()).unwrap()[0];
        let s = SmoothingVector::new(vec![1.3; 16]).unwrap();
        let target = x.matmul(&w).unwrap();
        let profile = BitProfile::new(4, 8).unwrap();
        let (_, g) = loss_and_grad(&s, x, &w, &target, &profile).unwrap().unwrap();

        let a0 = x.scale_cols(&s.recip()).unwrap();
        let b0 = w.scale_rows(s.as_slice()).unwrap();
        let ea = profile.quantize_activation(&a0).unwrap().sub(&a0).unwrap();
        let eb = profile.quantize_weight(&b0).unwrap().sub(&b0).unwrap();
        let surrogate = |theta: &[f64]| {
            let sv: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
            let inv: Vec<f64> = sv.iter().map(|v| 1.0 / v).collect();
            let qa = x.scale_cols(&inv).unwrap().add(&ea).unwrap();
            let qb = w.scale_rows(&sv).unwrap().add(&eb).unwrap();
            let y = qa.matmul(&qb).unwrap();
            y.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / y.data().len() as f64
        };
        let theta: Vec<f64> = s.as_slice().iter().map(|v| v.ln()).collect();
        let h = 1e-7;
        for i in [0, 5, 11] {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (surrogate(&p) - surrogate(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "channel {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (calib, w) = two_modality_layer(3);
        let init = init_modality_factors(&calib, &w).unwrap();
        let cfg = MasConfig { epochs: 0, ..MasConfig::default() };
        let out = optimize_factors(&init, &calib, &w, &BitProfile::new(4, 8).unwrap(), &cfg).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn lossless_profile_keeps_factors() {
        let (calib, w) = two_modality_layer(4);
        let init = init_modality_factors(&calib, &w).unwrap();
        let profile = BitProfile::new(16, 16).unwrap();
        let (out, trace) = optimize_factors_traced(&init, &calib, &w, &profile, &MasConfig::default()).unwrap();
        assert!(trace.initial_objective <= 1e-10);
        // Zero gradient means Adam never moves.
        assert_eq!(out, init);
    }

    #[test]
    fn monotone_deterministic_and_separable() {
        let (calib, w) = two_modality_layer(5);
        let profile = BitProfile::new(4, 8).unwrap();
        let init = init_modality_factors(&calib, &w).unwrap();
        let cfg = MasConfig { epochs: 3, seed: 9, ..MasConfig::default() };
        let (a, trace) = optimize_factors_traced(&init, &calib, &w, &profile, &cfg).unwrap();
        let before = weighted_objective(&init, &calib, &w, &profile, &cfg).unwrap();
        let after = weighted_objective(&a, &calib, &w, &profile, &cfg).unwrap();
        assert!(after <= before);
        assert!((trace.initial_objective - before).abs() <= 1e-12 * before);
        assert!((trace.final_objective - after).abs() <= 1e-12 * before);

        let b = optimize_factors(&init, &calib, &w, &profile, &cfg).unwrap();
        assert_eq!(a, b);

        // Optimizing one modality alone gives the same vector.
        let mut only_text = CalibrationSet::new(calib.d_in());
        for batch in calib.batches(&ModalityId::text()).unwrap() {
            only_text.push(ModalityId::text(), batch.clone()).unwrap();
        }
        let c = optimize_factors(&init, &only_text, &w, &profile, &cfg).unwrap();
        assert_eq!(c.get(&ModalityId::text()).unwrap(), a.get(&ModalityId::text()).unwrap());
        assert!(a.iter().all(|(_, s)| s.as_slice().iter().all(|v| *v > 0.0)));
    }

    #[test]
    fn beats_unified_closed_form() {
        let (calib, w) = two_modality_layer(6);
        let profile = BitProfile::new(4, 8).unwrap();
        let cfg = MasConfig::default();
        let init = init_modality_factors(&calib, &w).unwrap();
        let learned = optimize_factors(&init, &calib, &w, &profile, &cfg).unwrap();
        let mas = weighted_objective(&learned, &calib, &w, &profile, &cfg).unwrap();

        let stats: BTreeMap<_, _> = calib
            .modalities()
            .map(|m| (m.clone(), collect_channel_stats(&calib.stacked(m).unwrap(), &w).unwrap()))
            .collect();
        let uni = unified_factors(&stats, 0.5).unwrap();
        let uni_obj: f64 = calib
            .modalities()
            .map(|m| mae_loss(&uni, &calib.stacked(m).unwrap(), &w, &profile).unwrap())
            .sum();
        assert!(mas < uni_obj, "mas {mas} vs unified {uni_obj}");
    }

    #[test]
    fn zero_lambda_modality_untouched() {
        let (calib, w) = two_modality_layer(7);
        let profile = BitProfile::new(4, 8).unwrap();
        let init = init_modality_factors(&calib, &w).unwrap();
        let mut cfg = MasConfig::default();
        cfg.lambda.insert(ModalityId::vision(), 0.0);
        let out = optimize_factors(&init, &calib, &w, &profile, &cfg).unwrap();
        assert_eq!(out.get(&ModalityId::vision()).unwrap(), init.get(&ModalityId::vision()).unwrap());
    }

    #[test]
    fn huge_steps_are_rejected_not_propagated() {
        let (calib, w) = two_modality_layer(8);
        let profile = BitProfile::new(4, 8).unwrap();
        let init = init_modality_factors(&calib, &w).unwrap();
        let cfg = MasConfig {
            step_size: 1e6,
            optimizer: Optimizer::SignDescent,
            epochs: 3,
            ..MasConfig::default()
        };
        let (out, trace) = optimize_factors_traced(&init, &calib, &w, &profile, &cfg).unwrap();
        assert!(trace.rejected_steps > 0);
        assert!(trace.final_objective <= trace.initial_objective);
        assert!(out.iter().all(|(_, s)| s.as_slice().iter().all(|v| v.is_finite() && *v > 0.0)));
    }

    #[test]
    fn shared_optimizer_does_not_regress() {
        let (calib, w) = two_modality_layer(9);
        let profile = BitProfile::new(4, 8).unwrap();
        let cfg = MasConfig::default();
        let stats: BTreeMap<_, _> = calib
            .modalities()
            .map(|m| (m.clone(), calib.channel_stats(m, &w).unwrap()))
            .collect();
        let uni = unified_factors(&stats, 0.5).unwrap();
        let learned = optimize_shared(&uni, &calib, &w, &profile, &cfg).unwrap();
        let obj = |s: &SmoothingVector| {
            let f = ModalityFactors::shared(s, calib.modalities());
            weighted_objective(&f, &calib, &w, &profile, &cfg).unwrap()
        };
        assert!(obj(&learned) <= obj(&uni));
    }
}
