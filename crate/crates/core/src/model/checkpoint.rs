//! Checkpoint container:
//!
//! ```text
//! b"TMMN" | version: u16 LE | header_len: u64 LE | JSON header | f32 LE payload
//! ```
//!
//! The header lists every tensor with its shape and its byte range inside the
//! payload. Floats are stored verbatim so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, Layer, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMMN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    layers: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

fn bad(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::format("checkpoint", field, detail)
}

/// Frames `header` and `payload` with the given magic and version.
pub(crate) fn write_container(magic: &[u8; 4], version: u16, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Splits a container into `(header_json, payload)`, validating the frame.
pub(crate) fn read_container<'a>(
    container: &'static str,
    magic: &[u8; 4],
    version: u16,
    bytes: &'a [u8],
) -> Result<(&'a [u8], &'a [u8])> {
    let err = |f: &str, d: String| Error::format(container, f, d);
    match bytes.get(0..4) {
        Some(m) if m == magic => {}
        Some(m) => return Err(err("magic", format!("expected {magic:?}, got {m:?}"))),
        None => return Err(err("magic", format!("file is only {} bytes", bytes.len()))),
    }
    let v = bytes
        .get(4..6)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| err("version", "truncated".into()))?;
    if v != version {
        return Err(err("version", format!("expected {version}, got {v}")));
    }
    let hlen = bytes
        .get(6..14)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| err("header_len", "truncated".into()))?;
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(14))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            err(
                "header_len",
                format!("{hlen} bytes declared, {} available", bytes.len().saturating_sub(14)),
            )
        })?;
    Ok((&bytes[14..hend], &bytes[hend..]))
}

pub(crate) fn f32_payload(tensors: &[&Tensor]) -> Vec<u8> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

/// Decodes a tensor from its record, checking the record against the payload.
pub(crate) fn decode_tensor(container: &'static str, rec: &TensorRecord, payload: &[u8]) -> Result<Tensor> {
    let numel: usize = rec.shape.iter().product();
    if rec.byte_len != numel * 4 {
        return Err(Error::format(
            container,
            format!("{}.byte_len", rec.name),
            format!("{} bytes for shape {:?}", rec.byte_len, rec.shape),
        ));
    }
    let end = rec.byte_offset + rec.byte_len;
    let bytes = payload.get(rec.byte_offset..end).ok_or_else(|| {
        Error::format(
            container,
            format!("{}.byte_offset", rec.name),
            format!(
                "range {}..{end} exceeds payload of {} bytes",
                rec.byte_offset,
                payload.len()
            ),
        )
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(rec.shape.clone(), data)
        .map_err(|e| Error::format(container, format!("{}.shape", rec.name), e.to_string()))
}

pub(crate) fn records(named: &[(String, &Tensor)]) -> Vec<TensorRecord> {
    let mut offset = 0;
    named
        .iter()
        .map(|(name, t)| {
            let rec = TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: t.len() * 4,
            };
            offset += rec.byte_len;
            rec
        })
        .collect()
}

fn encode(model: &Classifier, provenance: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let named: Vec<(String, &Tensor)> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("layer{i}.weight"), &l.weight),
                (format!("layer{i}.bias"), &l.bias),
            ]
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        layers: records(&named),
        provenance: provenance.cloned(),
    };
    let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    Ok(write_container(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &serde_json::to_vec(&header)?,
        &f32_payload(&tensors),
    ))
}

fn decode(bytes: &[u8]) -> Result<(Classifier, Option<serde_json::Value>)> {
    let (hbytes, payload) = read_container("checkpoint", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes)?;
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| bad("header", e.to_string()))?;
    let declared: usize = header.layers.iter().map(|r| r.byte_len).sum();
    if declared != payload.len() {
        return Err(bad(
            "payload",
            format!("header declares {declared} bytes, payload has {}", payload.len()),
        ));
    }
    if !header.layers.len().is_multiple_of(2) {
        return Err(bad("layers", "weight/bias records must come in pairs"));
    }
    let mut layers = Vec::with_capacity(header.layers.len() / 2);
    for pair in header.layers.chunks(2) {
        layers.push(Layer {
            weight: decode_tensor("checkpoint", &pair[0], payload)?,
            bias: decode_tensor("checkpoint", &pair[1], payload)?,
        });
    }
    let model = Classifier::from_layers(header.config, layers)
        .map_err(|e| bad("layers", e.to_string()))?;
    Ok((model, header.provenance))
}

/// Writes `model` and optional provenance JSON to `path`.
pub fn save_checkpoint(
    model: &Classifier,
    path: impl AsRef<Path>,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, provenance)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Classifier, Option<serde_json::Value>)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
