//! Raw tensor files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header (shape, dtype, byte order), then the raw little-endian f64
//! blob. Bit-exact, dependency-free, and diffable by hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CPLTENS\x01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    byte_order: String,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
        byte_order: "little".into(),
    };
    let hj = serde_json::to_vec(&header).expect("plain struct serializes");
    let mut out = Vec::with_capacity(16 + hj.len() + 8 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
    out.extend_from_slice(&hj);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |detail: String| Error::FileFormat { path: origin.to_string(), detail };
    if bytes.len() < 16 {
        return Err(fail(format!("only {} bytes, header cannot fit", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(fail("bad magic (not a raw tensor file)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file size".into()))?;
    let header: TensorHeader = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| fail(format!("unreadable header: {e}")))?;
    if header.dtype != "f64" {
        return Err(fail(format!("unsupported dtype {}", header.dtype)));
    }
    if header.byte_order != "little" {
        return Err(fail(format!("unsupported byte order {}", header.byte_order)));
    }
    let count: usize = header.shape.iter().product();
    let blob = &bytes[blob_start..];
    if blob.len() != 8 * count {
        return Err(fail(format!(
            "shape {:?} implies {} bytes of data, file has {}",
            header.shape,
            8 * count,
            blob.len()
        )));
    }
    let data: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(header.shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tensor(&bytes, &path.display().to_string())
}
