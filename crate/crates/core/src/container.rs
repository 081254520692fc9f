//! Tensor container: a JSON manifest plus one little-endian binary blob.
//!
//! The manifest lists each tensor's name, shape, element kind, quant
//! params, and byte extent inside the blob. Kinds are `real32` (f32),
//! `int8-code` (i8), and `int4-code` (two codes per byte, low nibble
//! first, two's-complement nibbles). The same container carries weight
//! sets and datasets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{ActivationQuant, StoredTensor, WeightEntry, WeightSet};
use crate::quantizer::{BitWidth, QuantParams, QuantTensor};
use crate::tensor::Tensor;

pub const CONTAINER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    #[serde(rename = "real32")]
    Real32,
    #[serde(rename = "int8-code")]
    Int8Code,
    #[serde(rename = "int4-code")]
    Int4Code,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ElementKind,
    pub scale: Option<f64>,
    pub zero_point: Option<f64>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    /// Blob file name, resolved relative to the manifest's directory.
    pub blob: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub activations: BTreeMap<String, ActivationQuant>,
    pub tensors: Vec<ManifestEntry>,
}

/// In-memory container contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub activations: BTreeMap<String, ActivationQuant>,
    pub items: BTreeMap<String, ContainerItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerItem {
    Real(Tensor),
    Quant(QuantTensor),
}

impl ContainerItem {
    fn kind(&self) -> ElementKind {
        match self {
            ContainerItem::Real(_) => ElementKind::Real32,
            ContainerItem::Quant(q) => match q.params.bit_width {
                BitWidth::Q8 => ElementKind::Int8Code,
                BitWidth::Q4 => ElementKind::Int4Code,
                BitWidth::Fp32 => unreachable!("quant tensors never hold fp32"),
            },
        }
    }
}

fn encode_payload(item: &ContainerItem) -> Vec<u8> {
    match item {
        ContainerItem::Real(t) => {
            let mut out = Vec::with_capacity(t.data.len() * 4);
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out
        }
        ContainerItem::Quant(q) => match q.params.bit_width {
            BitWidth::Q8 => q.codes.iter().map(|&c| c as i8 as u8).collect(),
            BitWidth::Q4 => {
                let mut out = Vec::with_capacity(q.codes.len().div_ceil(2));
                for pair in q.codes.chunks(2) {
                    let lo = (pair[0] as u8) & 0x0F;
                    let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
                    out.push(lo | (hi << 4));
                }
                out
            }
            BitWidth::Fp32 => unreachable!(),
        },
    }
}

fn sign_extend_nibble(n: u8) -> i32 {
    if n >= 8 {
        n as i32 - 16
    } else {
        n as i32
    }
}

fn decode_payload(entry: &ManifestEntry, bytes: &[u8]) -> Result<ContainerItem> {
    let numel: usize = entry.shape.iter().product();
    match entry.kind {
        ElementKind::Real32 => {
            if bytes.len() != numel * 4 {
                return Err(Error::Invalid(format!(
                    "tensor '{}': payload is {} bytes, expected {}",
                    entry.name,
                    bytes.len(),
                    numel * 4
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(ContainerItem::Real(Tensor { shape: entry.shape.clone(), data }))
        }
        ElementKind::Int8Code | ElementKind::Int4Code => {
            let bw = if entry.kind == ElementKind::Int8Code { BitWidth::Q8 } else { BitWidth::Q4 };
            let (scale, zero_point) = match (entry.scale, entry.zero_point) {
                (Some(s), Some(z)) => (s, z),
                _ => {
                    return Err(Error::Invalid(format!(
                        "tensor '{}': quantized entries need scale and zero_point",
                        entry.name
                    )))
                }
            };
            let params = QuantParams::new(scale, zero_point, bw)?;
            let expected = bw.payload_bytes(numel);
            if bytes.len() != expected {
                return Err(Error::Invalid(format!(
                    "tensor '{}': payload is {} bytes, expected {expected}",
                    entry.name,
                    bytes.len()
                )));
            }
            let codes: Vec<i32> = match bw {
                BitWidth::Q8 => bytes.iter().map(|&b| b as i8 as i32).collect(),
                BitWidth::Q4 => {
                    let mut codes = Vec::with_capacity(numel);
                    for &b in bytes {
                        codes.push(sign_extend_nibble(b & 0x0F));
                        if codes.len() < numel {
                            codes.push(sign_extend_nibble(b >> 4));
                        }
                    }
                    codes
                }
                BitWidth::Fp32 => unreachable!(),
            };
            let (qmin, qmax) = bw.code_range().unwrap();
            if let Some(bad) = codes.iter().find(|&&c| c < qmin || c > qmax) {
                return Err(Error::Invalid(format!(
                    "tensor '{}': code {bad} outside [{qmin}, {qmax}]",
                    entry.name
                )));
            }
            Ok(ContainerItem::Quant(QuantTensor { shape: entry.shape.clone(), codes, params }))
        }
    }
}

impl Container {
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .ok_or_else(|| Error::Invalid("container path has no file name".into()))?
            .to_string_lossy()
            .into_owned();
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.items.len());
        for (name, item) in &self.items {
            let payload = encode_payload(item);
            let (shape, scale, zero_point) = match item {
                ContainerItem::Real(t) => (t.shape.clone(), None, None),
                ContainerItem::Quant(q) => {
                    (q.shape.clone(), Some(q.params.scale), Some(q.params.zero_point))
                }
            };
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape,
                kind: item.kind(),
                scale,
                zero_point,
                byte_offset: blob.len() as u64,
                byte_length: payload.len() as u64,
            });
            blob.extend_from_slice(&payload);
        }
        let manifest = Manifest {
            schema: CONTAINER_SCHEMA_VERSION,
            blob: blob_name,
            meta: self.meta.clone(),
            activations: self.activations.clone(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Invalid(format!("manifest serialization failed: {e}")))?;
        std::fs::write(manifest_path, text)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        std::fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))
    }

    pub fn load(manifest_path: &Path) -> Result<Container> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path.display().to_string(), e.line(), e.to_string()))?;
        if manifest.schema != CONTAINER_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported container schema {} (expected {CONTAINER_SCHEMA_VERSION})",
                manifest.schema
            )));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
        let mut items = BTreeMap::new();
        for entry in &manifest.tensors {
            let start = entry.byte_offset as usize;
            let end = start + entry.byte_length as usize;
            if end > blob.len() {
                return Err(Error::Invalid(format!(
                    "tensor '{}' extends past the end of the blob",
                    entry.name
                )));
            }
            items.insert(entry.name.clone(), decode_payload(entry, &blob[start..end])?);
        }
        Ok(Container { meta: manifest.meta, activations: manifest.activations, items })
    }
}

// Weight-set adapter. Bias tensors are stored as `<name>.bias` real32
// entries at every precision.

pub fn save_weight_set(ws: &WeightSet, manifest_path: &Path) -> Result<()> {
    let mut container = Container::default();
    container.meta.insert("content".into(), "weights".into());
    container.meta.insert("bit_width".into(), ws.bit_width.name().into());
    container.activations = ws.activations.clone().into_iter().collect();
    for (name, entry) in &ws.entries {
        let item = match &entry.weight {
            StoredTensor::Real(t) => ContainerItem::Real(t.clone()),
            StoredTensor::Quant(q) => ContainerItem::Quant(q.clone()),
        };
        container.items.insert(name.clone(), item);
        if let Some(bias) = &entry.bias {
            container.items.insert(format!("{name}.bias"), ContainerItem::Real(bias.clone()));
        }
    }
    container.save(manifest_path)
}

pub fn load_weight_set(manifest_path: &Path) -> Result<WeightSet> {
    let container = Container::load(manifest_path)?;
    let bit_width: BitWidth = container
        .meta
        .get("bit_width")
        .ok_or_else(|| Error::Invalid("weight container lacks bit_width metadata".into()))?
        .parse()?;
    let mut ws = WeightSet::new(bit_width);
    ws.activations = container.activations.clone().into_iter().collect();
    for (name, item) in &container.items {
        if name.ends_with(".bias") {
            continue;
        }
        let weight = match (item, bit_width) {
            (ContainerItem::Real(t), BitWidth::Fp32) => StoredTensor::Real(t.clone()),
            (ContainerItem::Quant(q), bw) if q.params.bit_width == bw => StoredTensor::Quant(q.clone()),
            _ => {
                return Err(Error::Invalid(format!(
                    "tensor '{name}' does not match container bit width {bit_width}"
                )))
            }
        };
        let bias = match container.items.get(&format!("{name}.bias")) {
            Some(ContainerItem::Real(t)) => Some(t.clone()),
            Some(ContainerItem::Quant(_)) => {
                return Err(Error::Invalid(format!("bias of '{name}' must be real32")))
            }
            None => None,
        };
        ws.entries.insert(name.clone(), WeightEntry { weight, bias });
    }
    Ok(ws)
}
