//! Affine quantization: code/real conversion, fake quantization, the
//! straight-through gradient, and range observers.
//!
//! A real value `x` maps to an integer code via
//! `clip(round((x - zero_point) / scale), qmin, qmax)` and is reconstructed
//! as `code * scale + zero_point`. Rounding is half-away-from-zero
//! (Rust's `f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to computed scales so constant tensors stay representable.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Number of geometric grid points searched by the MSE observer.
pub const MSE_GRID_POINTS: usize = 100;

/// Numeric precision of a tensor. Ordered `Q4 < Q8 < Fp32` so the scheduler
/// can compare precisions directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BitWidth {
    #[serde(rename = "q4")]
    Q4,
    #[serde(rename = "q8")]
    Q8,
    #[serde(rename = "fp32")]
    Fp32,
}

impl BitWidth {
    /// Inclusive integer code range, `None` for `Fp32`.
    pub fn code_range(self) -> Option<(i32, i32)> {
        match self {
            BitWidth::Q4 => Some((-8, 7)),
            BitWidth::Q8 => Some((-128, 127)),
            BitWidth::Fp32 => None,
        }
    }

    pub fn is_quantized(self) -> bool {
        self != BitWidth::Fp32
    }

    /// Bytes occupied by `params` elements at this precision; Q4 codes pack
    /// two per byte.
    pub fn payload_bytes(self, params: usize) -> usize {
        match self {
            BitWidth::Fp32 => params * 4,
            BitWidth::Q8 => params,
            BitWidth::Q4 => params.div_ceil(2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BitWidth::Q4 => "q4",
            BitWidth::Q8 => "q8",
            BitWidth::Fp32 => "fp32",
        }
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BitWidth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q4" | "Q4" => Ok(BitWidth::Q4),
            "q8" | "Q8" => Ok(BitWidth::Q8),
            "fp32" | "FP32" => Ok(BitWidth::Fp32),
            other => Err(Error::Invalid(format!("unknown bit width '{other}'"))),
        }
    }
}

/// Per-tensor affine parameters: `real = code * scale + zero_point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: f64,
    pub bit_width: BitWidth,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: f64, bit_width: BitWidth) -> Result<Self> {
        if !bit_width.is_quantized() {
            return Err(Error::InvalidParams("fp32 tensors carry no quant params".into()));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParams(format!("scale must be positive and finite, got {scale}")));
        }
        if !zero_point.is_finite() {
            return Err(Error::InvalidParams(format!("zero point must be finite, got {zero_point}")));
        }
        Ok(QuantParams { scale, zero_point, bit_width })
    }

    pub fn code_range(&self) -> (i32, i32) {
        self.bit_width.code_range().expect("quant params never hold fp32")
    }
}

/// An integer-coded tensor plus the params that decode it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn numel(&self) -> usize {
        self.codes.len()
    }
}

/// Quantize a real tensor to integer codes.
pub fn affine_quantize(x: &Tensor, p: &QuantParams) -> Result<QuantTensor> {
    if let Some(index) = x.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    let (qmin, qmax) = p.code_range();
    let codes = x
        .data
        .iter()
        .map(|&v| quantize_one(v, p.scale, p.zero_point, qmin, qmax))
        .collect();
    Ok(QuantTensor { shape: x.shape.clone(), codes, params: *p })
}

/// Reconstruct real values from codes.
pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q
        .codes
        .iter()
        .map(|&c| c as f64 * q.params.scale + q.params.zero_point)
        .collect();
    Tensor { shape: q.shape.clone(), data }
}

/// Quantize-then-dequantize in the real domain. Idempotent.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&affine_quantize(x, p)?))
}

#[inline]
pub(crate) fn quantize_one(v: f64, scale: f64, zero_point: f64, qmin: i32, qmax: i32) -> i32 {
    let r = ((v - zero_point) / scale).round();
    if r < qmin as f64 {
        qmin
    } else if r > qmax as f64 {
        qmax
    } else {
        r as i32
    }
}

#[inline]
pub(crate) fn fake_quantize_one(v: f64, p: &QuantParams) -> f64 {
    let (qmin, qmax) = p.code_range();
    quantize_one(v, p.scale, p.zero_point, qmin, qmax) as f64 * p.scale + p.zero_point
}

/// Clipped straight-through estimator: the upstream gradient passes where
/// `(x - zero_point)/scale` falls inside `[qmin, qmax]` (boundaries count as
/// inside) and is zeroed elsewhere.
pub fn ste_gradient(upstream: &Tensor, x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    if upstream.shape != x.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape),
            got: format!("{:?}", upstream.shape),
        });
    }
    let (qmin, qmax) = p.code_range();
    let data = upstream
        .data
        .iter()
        .zip(&x.data)
        .map(|(&g, &v)| {
            let r = (v - p.zero_point) / p.scale;
            if r >= qmin as f64 && r <= qmax as f64 {
                g
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor { shape: x.shape.clone(), data })
}

/// Input/output observers of one parametric layer.
pub type ActivationObserverPair = (RangeObserver, RangeObserver);

/// How an observer turns a recorded range into quant params.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObserverMode {
    /// Scale spans the full recorded range.
    MinMax,
    /// Grid search over scales minimizing reconstruction MSE on a
    /// calibration sample. Used for Q4, where the narrow code range makes
    /// the min/max scale too coarse.
    MseSearch,
}

/// Running min/max over observed tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub mode: ObserverMode,
    pub running_min: f64,
    pub running_max: f64,
    pub sample_count: u64,
}

impl RangeObserver {
    pub fn new(mode: ObserverMode) -> Self {
        RangeObserver {
            mode,
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
            sample_count: 0,
        }
    }

    /// Fold a tensor into the running range, returning the updated observer.
    pub fn observe(&self, x: &Tensor) -> Result<RangeObserver> {
        if let Some(index) = x.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        let mut next = *self;
        for &v in &x.data {
            next.running_min = next.running_min.min(v);
            next.running_max = next.running_max.max(v);
        }
        next.sample_count += 1;
        Ok(next)
    }

    /// Compute quant params for the recorded range.
    ///
    /// MinMax anchors the code range onto `[running_min, running_max]`.
    /// MseSearch sweeps `MSE_GRID_POINTS` geometric scale candidates between
    /// `minmax_scale / 10` and `minmax_scale * 2` plus the min/max scale
    /// itself, keeping the candidate with the lowest reconstruction MSE on
    /// `calib`; candidate zero-points are re-centered so every candidate
    /// covers an interval centered on the recorded range.
    pub fn compute_qparams(&self, bw: BitWidth, calib: &Tensor) -> Result<QuantParams> {
        if self.sample_count == 0 {
            return Err(Error::Invalid("observer has seen no samples".into()));
        }
        if !bw.is_quantized() {
            return Err(Error::InvalidParams("cannot derive quant params for fp32".into()));
        }
        let (qmin, qmax) = bw.code_range().unwrap();
        let minmax = self.minmax_params(bw, qmin, qmax);
        match self.mode {
            ObserverMode::MinMax => Ok(minmax),
            ObserverMode::MseSearch => {
                if calib.numel() == 0 {
                    return Err(Error::Invalid("mse search needs a non-empty calibration sample".into()));
                }
                let mut best = minmax;
                let mut best_mse = reconstruction_mse(calib, &minmax);
                for scale in mse_scale_candidates(minmax.scale) {
                    let cand = centered_params(scale, self.running_min, self.running_max, bw);
                    let mse = reconstruction_mse(calib, &cand);
                    if mse < best_mse {
                        best = cand;
                        best_mse = mse;
                    }
                }
                Ok(best)
            }
        }
    }

    fn minmax_params(&self, bw: BitWidth, qmin: i32, qmax: i32) -> QuantParams {
        let range = self.running_max - self.running_min;
        if range <= 0.0 {
            return QuantParams { scale: SCALE_FLOOR, zero_point: self.running_min, bit_width: bw };
        }
        let scale = (range / (qmax - qmin) as f64).max(SCALE_FLOOR);
        let zero_point = self.running_min - qmin as f64 * scale;
        QuantParams { scale, zero_point, bit_width: bw }
    }
}

/// The geometric scale grid swept by MseSearch.
pub fn mse_scale_candidates(minmax_scale: f64) -> Vec<f64> {
    let lo = minmax_scale / 10.0;
    let hi = minmax_scale * 2.0;
    let ratio = (hi / lo).powf(1.0 / (MSE_GRID_POINTS - 1) as f64);
    (0..MSE_GRID_POINTS).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// Zero-point placing the representable interval symmetrically around the
/// recorded range's midpoint. At the min/max scale this coincides with the
/// MinMax anchoring, so that candidate reproduces MinMax exactly.
pub fn centered_params(scale: f64, min: f64, max: f64, bw: BitWidth) -> QuantParams {
    let (qmin, qmax) = bw.code_range().unwrap();
    let center = (min + max) / 2.0;
    let zero_point = center - scale * (qmin + qmax) as f64 / 2.0;
    QuantParams { scale, zero_point, bit_width: bw }
}

/// Mean squared reconstruction error of fake-quantizing `sample` under `p`.
pub fn reconstruction_mse(sample: &Tensor, p: &QuantParams) -> f64 {
    let mut acc = 0.0;
    for &v in &sample.data {
        let d = fake_quantize_one(v, p) - v;
        acc += d * d;
    }
    acc / sample.numel() as f64
}
