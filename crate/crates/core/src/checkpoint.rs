//! Model checkpoints: one JSON header line followed by little-endian `f64`
//! payload holding each parameter's values and Adam moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{checksum_hex, fnv1a, parse_checksum, push_f64s, read_bytes, read_f64s, write_bytes};
use crate::error::{Error, Result};
use crate::models::{Fno, FnoConfig};
use crate::tensor::{CosineSchedule, ParamStore, Tensor};

const FORMAT: &str = "srafte-checkpoint";
const VERSION: u32 = 1;

/// Training position saved alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    /// Seed of the training run.
    #[serde(default)]
    pub seed: u64,
    pub schedule: Option<CosineSchedule>,
    /// Free-form provenance, e.g. training phase.
    pub tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: FnoConfig,
    step: u64,
    state: CheckpointState,
    params: Vec<ParamHeader>,
    payload_bytes: u64,
    checksum: String,
}

pub fn encode_checkpoint(model: &Fno, state: &CheckpointState) -> Vec<u8> {
    let mut payload = Vec::new();
    for e in model.params.entries() {
        push_f64s(&mut payload, e.value.data());
        push_f64s(&mut payload, &e.m);
        push_f64s(&mut payload, &e.v);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        step: model.params.step(),
        state: state.clone(),
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        payload_bytes: payload.len() as u64,
        checksum: checksum_hex(&payload),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, model: &Fno, state: &CheckpointState) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model, state))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(Fno, CheckpointState)> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err("missing checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(format_err(format!(
            "expected {FORMAT} v{VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let payload = &bytes[nl + 1..];
    if (payload.len() as u64) < header.payload_bytes {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: (nl + 1 + payload.len()) as u64,
            expected: header.payload_bytes,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 != header.payload_bytes {
        return Err(format_err(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - header.payload_bytes
        )));
    }
    let expected = parse_checksum(path, &header.checksum)?;
    let actual = fnv1a(payload);
    if expected != actual {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    header.config.validate()?;
    let mut params = ParamStore::new();
    let mut rest = payload;
    for p in &header.params {
        let len: usize = p.shape.iter().product();
        if 24 * len > rest.len() {
            return Err(format_err(format!("parameter `{}` overruns payload", p.name)));
        }
        let (chunk, tail) = rest.split_at(24 * len);
        rest = tail;
        let value = Tensor::new(p.shape.clone(), read_f64s(&chunk[..8 * len]))?;
        params.insert(p.name.clone(), value)?;
        let e = params.entry_mut(&p.name).expect("just inserted");
        e.m = read_f64s(&chunk[8 * len..16 * len]);
        e.v = read_f64s(&chunk[16 * len..]);
    }
    params.set_step(header.step);
    let reference = Fno::new(header.config.clone(), 0)?;
    for e in reference.params.entries() {
        match params.get(&e.name) {
            Some(t) if t.shape() == e.value.shape() => {}
            _ => {
                return Err(format_err(format!(
                    "parameter `{}` missing or misshapen for the stored architecture",
                    e.name
                )))
            }
        }
    }
    if params.len() != reference.params.len() {
        return Err(format_err("unexpected extra parameters".into()));
    }
    Ok((
        Fno {
            config: header.config,
            params,
        },
        header.state,
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(Fno, CheckpointState)> {
    decode_checkpoint(path, &read_bytes(path)?)
}
