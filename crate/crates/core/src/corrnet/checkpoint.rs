//! Binary parameter files.
//!
//! ```text
//! 8 bytes   magic "GMMRCKPT"
//! u32 LE    format version
//! u32 LE    header length in bytes
//! header    UTF-8 JSON: input mode, component count, layout table
//! f64 LE    parameter values in layout order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{CorrNetParams, Layout};
use crate::error::{Error, Result};
use crate::features::InputMode;

pub const MAGIC: &[u8; 8] = b"GMMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_mode: InputMode,
    components: usize,
    layout: Layout,
}

pub fn encode(params: &CorrNetParams) -> Vec<u8> {
    let header = Header { input_mode: params.input_mode(), components: params.components(), layout: params.layout().clone() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<CorrNetParams> {
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes.get(range).ok_or_else(|| Error::Checkpoint("file is truncated".into()))
    };
    if take(0..8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(8..12)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(12..16)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(16..16 + hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let expected = Layout::for_dims(header.input_mode.dim(), header.components);
    if header.layout != expected {
        return Err(Error::Checkpoint("layout table does not match the architecture".into()));
    }
    let body = &bytes[16 + hlen..];
    if body.len() != 8 * expected.total() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * expected.total(),
            body.len()
        )));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    CorrNetParams::from_values(header.input_mode, header.components, values)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, params: &CorrNetParams) -> Result<()> {
    Ok(std::fs::write(path, encode(params))?)
}

pub fn load(path: impl AsRef<Path>) -> Result<CorrNetParams> {
    decode(&std::fs::read(path)?)
}
