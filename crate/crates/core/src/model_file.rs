//! The `.vcm` model file: a JSON manifest followed by a little-endian weight
//! blob.
//!
//! ```text
//! "VCMF" | u32 format_version | u64 manifest_len | manifest JSON | blob
//! ```
//!
//! Offsets in the manifest are byte offsets into the blob; lengths count
//! scalars. Masks are hex-encoded bitsets, least significant bit first.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::net::{Architecture, LastEvent, LayerParams, LayerSpec, Network};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"VCMF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: Option<u64>,
    pub eps_max: Option<f64>,
    pub budget: Option<usize>,
    pub epochs: Option<usize>,
    pub dataset: Option<String>,
    pub normalization: Option<Normalization>,
    pub build_id: String,
}

impl Metadata {
    pub fn new() -> Self {
        Self {
            build_id: build_id(),
            ..Default::default()
        }
    }
}

pub fn build_id() -> String {
    match option_env!("SPARSECERT_BUILD_ID") {
        Some(id) => format!("{} {}", env!("CARGO_PKG_VERSION"), id),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub weight_shape: Vec<usize>,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    pub last_event: LastEvent,
    pub blob_len: usize,
    pub metadata: Metadata,
}

fn encode_mask(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn decode_mask(hex: &str, len: usize) -> Result<Vec<bool>> {
    if hex.len() != 2 * len.div_ceil(8) {
        return Err(Error::Format(format!(
            "mask of {} hex digits for {len} elements",
            hex.len()
        )));
    }
    let bytes = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
        .collect::<std::result::Result<Vec<u8>, _>>()
        .map_err(|e| Error::Format(format!("bad mask: {e}")))?;
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn to_bytes<T: Scalar>(net: &Network<T>, metadata: &Metadata) -> Result<Vec<u8>> {
    let width = T::DTYPE.size_of();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (i, p) in net.params() {
        let weight_offset = blob.len();
        p.weight.data().iter().for_each(|v| v.write_le(&mut blob));
        let bias_offset = blob.len();
        p.bias.data().iter().for_each(|v| v.write_le(&mut blob));
        tensors.push(TensorEntry {
            layer: i,
            weight_shape: p.weight.shape().to_vec(),
            weight_offset,
            weight_len: p.weight.len(),
            bias_offset,
            bias_len: p.bias.len(),
            mask: encode_mask(&p.mask),
        });
    }
    debug_assert_eq!(blob.len() % width, 0);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        input_shape: net.arch().input_shape.clone(),
        layers: net.arch().layers.clone(),
        tensors,
        last_event: net.last_event,
        blob_len: blob.len(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses the header and manifest, returning the manifest and the blob.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a .vcm model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < mlen {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    let blob = &body[mlen..];
    if blob.len() != manifest.blob_len {
        return Err(Error::Format(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    Ok((manifest, blob))
}

fn read_tensor<S: Scalar, T: Scalar>(
    blob: &[u8],
    offset: usize,
    len: usize,
    shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let w = S::DTYPE.size_of();
    let end = offset + len * w;
    let bytes = blob
        .get(offset..end)
        .ok_or_else(|| Error::Format(format!("tensor at {offset}+{len} outside blob")))?;
    let data = bytes
        .chunks_exact(w)
        .map(|c| T::from_f64(S::read_le(c).to_f64().unwrap()).unwrap())
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// Decodes a model, converting weights to `T` if the stored dtype differs.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, Manifest)> {
    let (manifest, blob) = read_manifest(bytes)?;
    let arch = Architecture {
        input_shape: manifest.input_shape.clone(),
        layers: manifest.layers.clone(),
    };
    let mut params: Vec<Option<LayerParams<T>>> = vec![None; arch.layers.len()];
    for t in &manifest.tensors {
        if t.layer >= params.len() || t.weight_shape.iter().product::<usize>() != t.weight_len {
            return Err(Error::Format(format!("inconsistent entry for layer {}", t.layer)));
        }
        let (weight, bias) = match manifest.dtype {
            DType::F32 => (
                read_tensor::<f32, T>(blob, t.weight_offset, t.weight_len, t.weight_shape.clone())?,
                read_tensor::<f32, T>(blob, t.bias_offset, t.bias_len, vec![t.bias_len])?,
            ),
            DType::F64 => (
                read_tensor::<f64, T>(blob, t.weight_offset, t.weight_len, t.weight_shape.clone())?,
                read_tensor::<f64, T>(blob, t.bias_offset, t.bias_len, vec![t.bias_len])?,
            ),
        };
        let mask = decode_mask(&t.mask, t.bias_len)?;
        params[t.layer] = Some(LayerParams { weight, bias, mask });
    }
    let mut net =
        Network::from_parts(arch, params).map_err(|e| Error::Format(e.to_string()))?;
    net.last_event = manifest.last_event;
    Ok((net, manifest))
}

pub fn save<T: Scalar>(net: &Network<T>, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = to_bytes(net, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Network<T>, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::presets;
    use crate::sparsity;

    fn net() -> Network<f32> {
        let arch = presets::architecture("cnn-small", &[1, 28, 28], 10).unwrap();
        let mut n = Network::build(arch, 5).unwrap();
        let k = n.total_param_count() / 3;
        sparsity::deactivate(&mut n, k).unwrap();
        n
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let n = net();
        let mut meta = Metadata::new();
        meta.seed = Some(5);
        meta.eps_max = Some(0.1);
        meta.normalization = Some(Normalization::mnist());
        let bytes = to_bytes(&n, &meta).unwrap();
        let (back, m) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(m.metadata, meta);
        assert_eq!(to_bytes(&back, &m.metadata).unwrap(), bytes);
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 13) as f32 / 13.0);
        assert_eq!(n.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn blob_is_little_endian() {
        let n = net();
        let bytes = to_bytes(&n, &Metadata::new()).unwrap();
        let (m, blob) = read_manifest(&bytes).unwrap();
        let first = n.layer_params(0).unwrap().weight.data()[0];
        let off = m.tensors[0].weight_offset;
        assert_eq!(&blob[off..off + 4], &first.to_le_bytes());
    }

    #[test]
    fn masks_survive_encoding() {
        let mask: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        assert_eq!(decode_mask(&encode_mask(&mask), 19).unwrap(), mask);
        assert!(decode_mask("ff", 19).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&net(), &Metadata::new()).unwrap();
        assert!(matches!(from_bytes::<f32>(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn dtype_conversion_on_load() {
        let n = net();
        let bytes = to_bytes(&n, &Metadata::new()).unwrap();
        let (wide, _) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(wide.cast::<f32>(), n);
    }
}
