//! Training state container: a versioned file holding the resolved run
//! config, every named parameter as an embedded tensor record, optimizer
//! moments, and a trailing integrity checksum.
//!
//! Layout: `PVCK` magic, format version byte, little-endian u32 header
//! length, JSON header, per-tensor payloads in header order, then the
//! SHA-256 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{json_diff, RunConfig};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::pvt1;

const MAGIC: [u8; 4] = *b"PVCK";
const FORMAT_VERSION: u8 = 1;

/// Optimizer state tensor, e.g. momentum velocity or Adam moments. Names
/// carry the slot and parameter: `sgd.v.point.conv1.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBuffer {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer step count (Adam bias correction needs it).
    pub opt_step: usize,
    pub params: ParamStore<f32>,
    pub moments: Vec<MomentBuffer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    opt_step: usize,
    params: Vec<TensorMeta>,
    moments: Vec<TensorMeta>,
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        config: ck.config.clone(),
        epoch: ck.epoch,
        opt_step: ck.opt_step,
        params: ck
            .params
            .entries()
            .iter()
            .map(|e| TensorMeta { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
        moments: ck
            .moments
            .iter()
            .map(|m| TensorMeta { name: m.name.clone(), shape: vec![m.data.len()] })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(u32::try_from(header_bytes.len()).map_err(|_| {
        Error::Checkpoint("header exceeds u32 length".into())
    })?)
    .to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for e in ck.params.entries() {
        pvt1::write(&mut out, &e.shape, &e.data)?;
    }
    for m in &ck.moments {
        pvt1::write(&mut out, &[m.data.len()], &m.data)?;
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 1 + 4 + 32 {
        return Err(Error::Checkpoint(format!("{} is truncated", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(format!("{} fails its checksum", path.display())));
    }
    if body[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    if body[4] != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported, this build reads {FORMAT_VERSION}",
            body[4]
        )));
    }
    let header_len = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
    let rest = &body[9..];
    if rest.len() < header_len {
        return Err(Error::Checkpoint(format!("{} header is truncated", path.display())));
    }
    let (header_bytes, mut payload) = rest.split_at(header_len);
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut params = ParamStore::<f32>::init(&header.config.model, header.config.train.seed)?;
    let expected: Vec<TensorMeta> = params
        .entries()
        .iter()
        .map(|e| TensorMeta { name: e.name.clone(), shape: e.shape.clone() })
        .collect();
    if expected.len() != header.params.len()
        || expected
            .iter()
            .zip(&header.params)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        let want: Vec<String> =
            expected.iter().map(|m| format!("{} {:?}", m.name, m.shape)).collect();
        let got: Vec<String> =
            header.params.iter().map(|m| format!("{} {:?}", m.name, m.shape)).collect();
        let diff = json_diff(&serde_json::to_value(&want)?, &serde_json::to_value(&got)?);
        return Err(Error::Checkpoint(format!(
            "parameter registry does not match its own config: {}",
            diff.join("; ")
        )));
    }
    for meta in &header.params {
        let (shape, data): (Vec<usize>, Vec<f32>) = pvt1::read(&mut payload)?;
        if shape != meta.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {shape:?}, header says {:?}",
                meta.name, meta.shape
            )));
        }
        params.set_data(&meta.name, data)?;
    }
    let mut moments = Vec::with_capacity(header.moments.len());
    for meta in &header.moments {
        let (shape, data): (Vec<usize>, Vec<f32>) = pvt1::read(&mut payload)?;
        if shape != meta.shape {
            return Err(Error::Checkpoint(format!(
                "moment {} has shape {shape:?}, header says {:?}",
                meta.name, meta.shape
            )));
        }
        moments.push(MomentBuffer { name: meta.name.clone(), data });
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} bytes of trailing payload",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        opt_step: header.opt_step,
        params,
        moments,
    })
}

/// Refuse a checkpoint whose architecture or preprocessing differs from
/// the requested config, naming each differing field. Training schedule
/// fields may differ (evaluating an early checkpoint is fine).
pub fn check_compatible(ck: &Checkpoint, want: &RunConfig) -> Result<()> {
    let model_diff = json_diff(
        &serde_json::to_value(&ck.config.model)?,
        &serde_json::to_value(&want.model)?,
    );
    let prep_diff = json_diff(
        &serde_json::to_value(&ck.config.prep)?,
        &serde_json::to_value(&want.prep)?,
    );
    let mut diff: Vec<String> =
        model_diff.into_iter().map(|d| format!("model.{d}")).collect();
    diff.extend(prep_diff.into_iter().map(|d| format!("prep.{d}")));
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is incompatible with the requested config: {}",
            diff.join("; ")
        )));
    }
    Ok(())
}
