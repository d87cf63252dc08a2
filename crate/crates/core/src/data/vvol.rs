//! `.vvol` volume files: magic line, JSON header, NUL, little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VVOL_MAGIC: &[u8] = b"VVOL1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode_volume(t: &Tensor) -> Vec<u8> {
    let header = serde_json::to_string(&Header {
        shape: t.shape().to_vec(),
        dtype: "f32le".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(VVOL_MAGIC.len() + header.len() + 2 + 4 * t.len());
    out.extend_from_slice(VVOL_MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(b"\n\0");
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor> {
    let rest = bytes
        .strip_prefix(VVOL_MAGIC)
        .ok_or_else(|| Error::Format("missing VVOL1 magic".into()))?;
    let nul = rest
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Format("unterminated vvol header".into()))?;
    let text = std::str::from_utf8(&rest[..nul]).map_err(|_| Error::Format("vvol header is not UTF-8".into()))?;
    let header: Header =
        serde_json::from_str(text.trim()).map_err(|e| Error::Format(format!("bad vvol header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let payload = &rest[nul + 1..];
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("invalid vvol shape {:?}", header.shape)))?;
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(header.shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(t)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}
