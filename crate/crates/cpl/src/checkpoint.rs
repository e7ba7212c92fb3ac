//! Checkpoint container: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (version, step, config echo, optimizer metadata, tensor
//! directory), then one contiguous blob of little-endian f64 values. The
//! format is deterministic: saving, loading, and saving again yields
//! byte-identical files, which is what makes interrupt/resume and
//! reproducibility claims checkable by hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: [u8; 8] = *b"CPLCKPT\x01";
pub const FORMAT_VERSION: u32 = 1;
const RNG_SCHEME: &str = "counter-v1";

#[derive(Debug, Serialize, Deserialize)]
struct EntryWire {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderWire {
    format_version: u32,
    step: u64,
    adam_step: u64,
    lr: f64,
    rng_scheme: String,
    config: TrainConfig,
    entries: Vec<EntryWire>,
}

/// Everything the checkpoint stores, in file order: learnable parameters,
/// the frozen extractor (for verification), then optimizer moments.
fn directory(trainer: &Trainer) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (name, t) in trainer.named_params() {
        out.push((name, t.shape().to_vec(), t.data().to_vec()));
    }
    for (name, t) in trainer.phi.named_tensors() {
        out.push((name, t.shape().to_vec(), t.data().to_vec()));
    }
    for (name, m, v) in trainer.adam.moments() {
        out.push((format!("adam.m.{name}"), vec![m.len()], m.to_vec()));
        out.push((format!("adam.v.{name}"), vec![v.len()], v.to_vec()));
    }
    out
}

pub fn save_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let dir = directory(trainer);
    let mut entries = Vec::with_capacity(dir.len());
    let mut offset = 0u64;
    for (name, shape, data) in &dir {
        entries.push(EntryWire {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f64".into(),
            offset,
            len: data.len() as u64,
        });
        offset += 8 * data.len() as u64;
    }
    let header = HeaderWire {
        format_version: FORMAT_VERSION,
        step: trainer.step,
        adam_step: trainer.adam.step(),
        lr: trainer.adam.lr(),
        rng_scheme: RNG_SCHEME.into(),
        config: trainer.cfg.clone(),
        entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, _, data) in &dir {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = save_bytes(trainer)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

fn format_err(origin: &str, detail: impl Into<String>) -> Error {
    Error::FileFormat { path: origin.to_string(), detail: detail.into() }
}

pub fn load_bytes(bytes: &[u8], origin: &str) -> Result<Trainer> {
    if bytes.len() < 16 {
        return Err(format_err(origin, format!("only {} bytes, header cannot fit", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(format_err(origin, "bad magic (not a checkpoint file)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(origin, "header length exceeds file size"))?;
    let header: HeaderWire = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| format_err(origin, format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{origin}: format version {} is not supported (reader expects {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.rng_scheme != RNG_SCHEME {
        return Err(Error::Checkpoint(format!(
            "{origin}: unknown rng scheme {:?} (expected {RNG_SCHEME:?})",
            header.rng_scheme
        )));
    }

    let blob = &bytes[blob_start..];
    let mut expected_offset = 0u64;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        if e.dtype != "f64" {
            return Err(format_err(origin, format!("entry {} has dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(format_err(
                origin,
                format!("entry {} at offset {} breaks blob contiguity", e.name, e.offset),
            ));
        }
        let count: usize = e.shape.iter().product();
        if count as u64 != e.len {
            return Err(format_err(
                origin,
                format!("entry {} shape {:?} disagrees with len {}", e.name, e.shape, e.len),
            ));
        }
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        if end > blob.len() {
            return Err(format_err(origin, format!("entry {} runs past end of file", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(format_err(
            origin,
            format!("{} trailing bytes after the last entry", blob.len() - expected_offset as usize),
        ));
    }

    assemble(header, tensors, origin)
}

fn assemble(header: HeaderWire, tensors: Vec<(String, Tensor)>, origin: &str) -> Result<Trainer> {
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut phi_stored: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut moments: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            moments.entry(rest.to_string()).or_default().0 = Some(t.into_data());
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            moments.entry(rest.to_string()).or_default().1 = Some(t.into_data());
        } else if name.starts_with("phi.") {
            if phi_stored.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("{origin}: duplicate entry {name}")));
            }
        } else if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("{origin}: duplicate entry {name}")));
        }
    }
    let slots = moments
        .into_iter()
        .map(|(name, (m, v))| match (m, v) {
            (Some(m), Some(v)) => Ok((name, m, v)),
            _ => Err(Error::Checkpoint(format!("{origin}: optimizer slot {name} is half-present"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let adam = Adam::restore(header.lr, header.adam_step, slots)?;
    let trainer = Trainer::from_state(header.config, header.step, params, adam)?;

    // the extractor is defined by the seed; stored copies exist to catch
    // corruption and any attempt to train through it
    let fresh: BTreeMap<String, &Tensor> =
        trainer.phi.named_tensors().into_iter().collect();
    if phi_stored.len() != fresh.len() {
        return Err(Error::Checkpoint(format!(
            "{origin}: expected {} frozen-extractor tensors, found {}",
            fresh.len(),
            phi_stored.len()
        )));
    }
    for (name, stored) in &phi_stored {
        let expect = fresh
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("{origin}: unexpected tensor {name}")))?;
        if stored.shape() != expect.shape() || stored.data() != expect.data() {
            return Err(Error::Checkpoint(format!(
                "{origin}: frozen extractor tensor {name} deviates from its seeded value"
            )));
        }
    }
    Ok(trainer)
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    load_bytes(&bytes, &path.display().to_string())
}
