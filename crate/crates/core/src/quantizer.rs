//! Simulated integer quantization.
//!
//! `Q(x) = (clamp(round(x/Δ) + z, q_min, q_max) − z) · Δ`, with ties rounded
//! half away from zero. Groups sharing one `(Δ, z)` pair are the whole tensor,
//! or one row each for per-channel and per-token granularity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MasqError, Result};
use crate::numerics::Matrix;

/// Floor applied to Δ for groups with zero range.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Bit-widths at or above this are treated as lossless and skipped.
pub const LOSSLESS_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One group per row. Weights are passed with output channels as rows.
    PerChannel,
    /// One group per row of an activation matrix.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Parameters come from calibration data and are reused.
    Static,
    /// Parameters are computed from the tensor being quantized.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub policy: Policy,
}

impl QuantScheme {
    pub fn new(
        bits: u8,
        symmetric: bool,
        granularity: Granularity,
        policy: Policy,
    ) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(MasqError::invalid(
                "QuantScheme::new",
                format!("bits must be in [2, 16], got {bits}"),
            ));
        }
        Ok(Self {
            bits,
            symmetric,
            granularity,
            policy,
        })
    }

    /// Symmetric per-output-channel weight scheme.
    pub fn weight(bits: u8) -> Result<Self> {
        Self::new(bits, true, Granularity::PerChannel, Policy::Static)
    }

    /// Symmetric per-token dynamic activation scheme.
    pub fn activation(bits: u8) -> Result<Self> {
        Self::new(bits, true, Granularity::PerToken, Policy::Dynamic)
    }

    pub fn q_min(&self) -> i64 {
        if self.symmetric {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i64 {
        if self.symmetric {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn is_lossless(&self) -> bool {
        self.bits >= LOSSLESS_BITS
    }

    fn group_count(&self, x: &Matrix) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel | Granularity::PerToken => x.rows(),
        }
    }
}

/// Per-group scales and zero points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero_point: Vec<i64>,
}

impl QuantParams {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }
}

/// Weight and activation schemes for one experiment, e.g. `W4A8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitProfile {
    pub weight: QuantScheme,
    pub activation: QuantScheme,
}

impl BitProfile {
    pub fn new(weight_bits: u8, activation_bits: u8) -> Result<Self> {
        Ok(Self {
            weight: QuantScheme::weight(weight_bits)?,
            activation: QuantScheme::activation(activation_bits)?,
        })
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight.bits, self.activation.bits)
    }

    /// Quantize-dequantize a `D_in x D_out` weight matrix.
    pub fn quantize_weight(&self, w: &Matrix) -> Result<Matrix> {
        fake_quantize_weight(w, &self.weight)
    }

    /// Quantize-dequantize a `T x D` activation matrix under a dynamic policy.
    pub fn quantize_activation(&self, x: &Matrix) -> Result<Matrix> {
        if self.activation.is_lossless() {
            return Ok(x.clone());
        }
        let params = compute_qparams(x, &self.activation)?;
        fake_quantize(x, &params, &self.activation)
    }
}

impl fmt::Display for BitProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for BitProfile {
    type Err = MasqError;

    /// Parses labels such as `W4A8` with default schemes.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || MasqError::Config(format!("bit profile `{s}` is not of the form W<bits>A<bits>"));
        let rest = s.strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let split = rest.find(['A', 'a']).ok_or_else(bad)?;
        let wb: u8 = rest[..split].parse().map_err(|_| bad())?;
        let ab: u8 = rest[split + 1..].parse().map_err(|_| bad())?;
        BitProfile::new(wb, ab).map_err(|e| MasqError::Config(e.to_string()))
    }
}

/// Derives `(Δ, z)` for every group of `x`.
pub fn compute_qparams(x: &Matrix, scheme: &QuantScheme) -> Result<QuantParams> {
    if x.is_empty() && scheme.granularity == Granularity::PerTensor {
        return Err(MasqError::invalid("compute_qparams", "empty tensor"));
    }
    let (qmin, qmax) = (scheme.q_min() as f64, scheme.q_max() as f64);
    let groups = scheme.group_count(x);
    let mut scale = Vec::with_capacity(groups);
    let mut zero_point = Vec::with_capacity(groups);
    for g in 0..groups {
        let values: &[f64] = match scheme.granularity {
            Granularity::PerTensor => x.data(),
            _ => x.row(g),
        };
        if scheme.symmetric {
            let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            scale.push((amax / qmax).max(SCALE_FLOOR));
            zero_point.push(0);
        } else {
            let (lo, hi) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
            let delta = ((hi - lo) / (qmax - qmin)).max(SCALE_FLOOR);
            let z = (-lo / delta).round().clamp(qmin, qmax) as i64;
            scale.push(delta);
            zero_point.push(z);
        }
    }
    Ok(QuantParams { scale, zero_point })
}

fn check_params(x: &Matrix, params: &QuantParams, scheme: &QuantScheme) -> Result<()> {
    let groups = scheme.group_count(x);
    if params.scale.len() != groups || params.zero_point.len() != groups {
        return Err(MasqError::dims(
            "fake_quantize",
            format!(
                "{groups} groups for a {}x{} tensor, params carry {}/{}",
                x.rows(),
                x.cols(),
                params.scale.len(),
                params.zero_point.len()
            ),
        ));
    }
    if params.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(MasqError::invalid("fake_quantize", "scales must be positive"));
    }
    let (qmin, qmax) = (scheme.q_min(), scheme.q_max());
    if params.zero_point.iter().any(|z| !(qmin..=qmax).contains(z)) {
        return Err(MasqError::invalid("fake_quantize", "zero point outside the code range"));
    }
    Ok(())
}

#[inline]
fn code(v: f64, delta: f64, z: i64, qmin: f64, qmax: f64) -> f64 {
    ((v / delta).round() + z as f64).clamp(qmin, qmax)
}

#[inline]
fn group_of(scheme: &QuantScheme, row: usize) -> usize {
    match scheme.granularity {
        Granularity::PerTensor => 0,
        _ => row,
    }
}

/// Round-clamp-dequantize every element with its group's parameters.
pub fn fake_quantize(x: &Matrix, params: &QuantParams, scheme: &QuantScheme) -> Result<Matrix> {
    check_params(x, params, scheme)?;
    let (qmin, qmax) = (scheme.q_min() as f64, scheme.q_max() as f64);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let g = group_of(scheme, r);
        let (delta, z) = (params.scale[g], params.zero_point[g]);
        for v in out.row_mut(r) {
            *v = (code(*v, delta, z, qmin, qmax) - z as f64) * delta;
        }
    }
    Ok(out)
}

/// Straight-through mask: `true` where the rounded code lies inside
/// `[q_min, q_max]` (gradient passes), `false` where it was clamped.
pub fn unclamped_mask(x: &Matrix, params: &QuantParams, scheme: &QuantScheme) -> Result<Vec<bool>> {
    check_params(x, params, scheme)?;
    let (qmin, qmax) = (scheme.q_min() as f64, scheme.q_max() as f64);
    let mut mask = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        let g = group_of(scheme, r);
        let (delta, z) = (params.scale[g], params.zero_point[g] as f64);
        mask.extend(x.row(r).iter().map(|&v| {
            let c = (v / delta).round() + z;
            (qmin..=qmax).contains(&c)
        }));
    }
    Ok(mask)
}

/// Integer storage form of a quantized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub params: QuantParams,
    pub scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.codes.len());
        for r in 0..self.rows {
            let g = group_of(&self.scheme, r);
            let (delta, z) = (self.params.scale[g], self.params.zero_point[g]);
            for &c in &self.codes[r * self.cols..(r + 1) * self.cols] {
                data.push((c as f64 - z as f64) * delta);
            }
        }
        Matrix::new(self.rows, self.cols, data).expect("dequantized values are finite")
    }
}

pub fn quantize_codes(
    x: &Matrix,
    params: &QuantParams,
    scheme: &QuantScheme,
) -> Result<QuantizedTensor> {
    check_params(x, params, scheme)?;
    let (qmin, qmax) = (scheme.q_min() as f64, scheme.q_max() as f64);
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        let g = group_of(scheme, r);
        let (delta, z) = (params.scale[g], params.zero_point[g]);
        codes.extend(x.row(r).iter().map(|&v| code(v, delta, z, qmin, qmax) as i32));
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        params: params.clone(),
        scheme: *scheme,
    })
}

/// Quantizes a `D_in x D_out` weight. Per-channel groups are output channels
/// (columns of `w`), so the codes are stored transposed as `D_out x D_in`.
pub fn quantize_weight_codes(w: &Matrix, scheme: &QuantScheme) -> Result<QuantizedTensor> {
    let wt = w.transpose();
    let params = compute_qparams(&wt, scheme)?;
    quantize_codes(&wt, &params, scheme)
}

pub fn fake_quantize_weight(w: &Matrix, scheme: &QuantScheme) -> Result<Matrix> {
    if scheme.is_lossless() {
        return Ok(w.clone());
    }
    Ok(quantize_weight_codes(w, scheme)?.dequantize().transpose())
}
