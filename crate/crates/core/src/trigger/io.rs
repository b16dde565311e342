//! Trigger files share the checkpoint framing with magic `TMMT`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Trigger, TriggerStats};
use crate::data::Extents;
use crate::error::{Error, Result};
use crate::model::{decode_tensor, f32_payload, read_container, records, write_container, TensorRecord};

pub const TRIGGER_MAGIC: &[u8; 4] = b"TMMT";
pub const TRIGGER_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    omega: f32,
    extents: Extents,
    /// Alternating run lengths of the mask, starting with a run of zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_runlength: Option<Vec<usize>>,
    stats: TriggerStats,
    tau: TensorRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

fn encode_runs(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[usize], d: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(d);
    for (i, &r) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    if mask.len() != d {
        return Err(Error::format(
            "trigger",
            "mask_runlength",
            format!("runs cover {} entries, expected {d}", mask.len()),
        ));
    }
    Ok(mask)
}

pub(crate) fn encode(trig: &Trigger, provenance: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let tau = trig.tau();
    let rec = records(&[("tau".to_string(), tau)]).pop().expect("one record");
    let header = Header {
        omega: trig.omega(),
        extents: trig.extents(),
        mask_runlength: trig.mask().map(encode_runs),
        stats: trig.stats.clone(),
        tau: rec,
        provenance: provenance.cloned(),
    };
    Ok(write_container(
        TRIGGER_MAGIC,
        TRIGGER_VERSION,
        &serde_json::to_vec(&header)?,
        &f32_payload(&[tau]),
    ))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(Trigger, Option<serde_json::Value>)> {
    let (h, payload) = read_container("trigger", TRIGGER_MAGIC, TRIGGER_VERSION, bytes)?;
    let header: Header =
        serde_json::from_slice(h).map_err(|e| Error::format("trigger", "header", e.to_string()))?;
    if header.tau.byte_offset + header.tau.byte_len != payload.len() {
        return Err(Error::format(
            "trigger",
            "payload",
            format!(
                "header declares {} bytes, payload has {}",
                header.tau.byte_offset + header.tau.byte_len,
                payload.len()
            ),
        ));
    }
    let tau = decode_tensor("trigger", &header.tau, payload)?;
    let d = header.extents.numel();
    let mask = header
        .mask_runlength
        .as_deref()
        .map(|r| decode_runs(r, d))
        .transpose()?;
    let mut t = Trigger::new(tau, header.omega, mask, header.extents)
        .map_err(|e| Error::format("trigger", "tau", e.to_string()))?;
    t.stats = header.stats;
    Ok((t, header.provenance))
}

pub fn save_trigger(
    trig: &Trigger,
    path: impl AsRef<Path>,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(trig, provenance)?).map_err(|e| Error::io(path, e))
}

pub fn load_trigger(path: impl AsRef<Path>) -> Result<(Trigger, Option<serde_json::Value>)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
