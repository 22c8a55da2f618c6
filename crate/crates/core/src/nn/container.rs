//! The `ltm-v1` parameter container.
//!
//! Layout: the ASCII tag `ltm-v1\n`, a little-endian `u64` header length, the
//! JSON header bytes, a little-endian `u64` parameter count, then every
//! parameter as a little-endian `f64` in declaration order. The header must
//! carry `"version": "ltm-v1"`.

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: &str = "ltm-v1";
const MAGIC: &[u8] = b"ltm-v1\n";

pub fn write_container<W: Write>(mut w: W, header: &Value, params: &[f64]) -> Result<()> {
    let mut header = header.clone();
    match header.as_object_mut() {
        Some(obj) => {
            obj.insert("version".into(), Value::from(CONTAINER_VERSION));
        }
        None => return Err(Error::Checkpoint("header must be a JSON object".into())),
    }
    let bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(Value, Vec<f64>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated container tag".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("missing ltm-v1 tag".into()));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Value = serde_json::from_slice(&header)?;
    if header.get("version").and_then(Value::as_str) != Some(CONTAINER_VERSION) {
        return Err(Error::Checkpoint("header version is not ltm-v1".into()));
    }
    let count = read_u64(&mut r)? as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {count} parameters, found {} bytes",
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, params))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated length field".into()))?;
    Ok(u64::from_le_bytes(b))
}
