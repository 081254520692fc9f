//! Weight storage for one network at one precision.
//!
//! Weights are real tensors at fp32 and integer-coded tensors at Q8/Q4.
//! Biases stay real at every precision. Quantized sets also carry the
//! frozen activation quant params each parametric layer uses to code its
//! input and requantize its output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{
    affine_quantize, BitWidth, ObserverMode, QuantParams, QuantTensor, RangeObserver,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StoredTensor {
    Real(Tensor),
    Quant(QuantTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Real(t) => &t.shape,
            StoredTensor::Quant(q) => &q.shape,
        }
    }
}

/// Frozen activation coding for one parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationQuant {
    pub input: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub weight: StoredTensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub bit_width: BitWidth,
    pub entries: BTreeMap<String, WeightEntry>,
    /// Per-layer activation params; empty for fp32 sets.
    pub activations: BTreeMap<String, ActivationQuant>,
}

impl WeightSet {
    pub fn new(bit_width: BitWidth) -> Self {
        WeightSet { bit_width, entries: BTreeMap::new(), activations: BTreeMap::new() }
    }

    pub fn entry(&self, name: &str) -> Result<&WeightEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingWeight(name.into()))
    }

    pub fn real_weight(&self, name: &str) -> Result<&Tensor> {
        match &self.entry(name)?.weight {
            StoredTensor::Real(t) => Ok(t),
            StoredTensor::Quant(_) => Err(Error::Invalid(format!(
                "weight '{name}' is quantized but a real tensor was requested"
            ))),
        }
    }

    pub fn quant_weight(&self, name: &str) -> Result<&QuantTensor> {
        match &self.entry(name)?.weight {
            StoredTensor::Quant(q) => Ok(q),
            StoredTensor::Real(_) => Err(Error::Invalid(format!(
                "weight '{name}' is real but quantized codes were requested"
            ))),
        }
    }

    pub fn activation(&self, name: &str) -> Result<&ActivationQuant> {
        self.activations
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no activation quant params for layer '{name}'")))
    }
}

/// Quantize an fp32 weight set to `bw`, deriving per-tensor params with the
/// observer mode the bit width calls for: plain min/max at Q8, the MSE
/// search at Q4. `activations` supplies the frozen activation ranges
/// (observed per layer input/output at fp32); the same observer-mode rule
/// applies to them.
pub fn quantize_weight_set(
    fp32: &WeightSet,
    bw: BitWidth,
    activation_ranges: &BTreeMap<String, (RangeObserver, RangeObserver)>,
    activation_samples: &BTreeMap<String, (Tensor, Tensor)>,
) -> Result<WeightSet> {
    if fp32.bit_width != BitWidth::Fp32 {
        return Err(Error::Invalid("quantize_weight_set expects an fp32 source".into()));
    }
    if !bw.is_quantized() {
        return Err(Error::Invalid("target bit width must be q8 or q4".into()));
    }
    let mode = match bw {
        BitWidth::Q4 => ObserverMode::MseSearch,
        _ => ObserverMode::MinMax,
    };
    let mut out = WeightSet::new(bw);
    for (name, entry) in &fp32.entries {
        let w = match &entry.weight {
            StoredTensor::Real(t) => t,
            StoredTensor::Quant(_) => {
                return Err(Error::Invalid(format!("source weight '{name}' is not real")))
            }
        };
        let obs = RangeObserver::new(mode).observe(w)?;
        let params = obs.compute_qparams(bw, w)?;
        let q = affine_quantize(w, &params)?;
        out.entries.insert(
            name.clone(),
            WeightEntry { weight: StoredTensor::Quant(q), bias: entry.bias.clone() },
        );
    }
    for (name, (in_obs, out_obs)) in activation_ranges {
        let (in_sample, out_sample) = activation_samples
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no calibration sample for layer '{name}'")))?;
        let mut in_obs = *in_obs;
        let mut out_obs = *out_obs;
        in_obs.mode = mode;
        out_obs.mode = mode;
        out.activations.insert(
            name.clone(),
            ActivationQuant {
                input: in_obs.compute_qparams(bw, in_sample)?,
                output: out_obs.compute_qparams(bw, out_sample)?,
            },
        );
    }
    Ok(out)
}
