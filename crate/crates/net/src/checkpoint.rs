//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `PVSNET01`, a little-endian u64 header length,
//! a JSON header, then the parameters as little-endian f64 followed by the
//! Adam moments `m` and `v` when present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{NetError, Result};
use crate::model::{NetModel, Segment};
use crate::optim::AdamState;
use crate::schedule::LRState;

pub const MAGIC: &[u8; 8] = b"PVSNET01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NetModel,
    /// Completed training epochs.
    pub epoch: usize,
    pub lr_state: Option<LRState>,
    pub adam: Option<AdamState>,
    /// Fingerprint of the preprocessing the training images went through.
    pub preprocess_fingerprint: Option<String>,
    /// Fingerprint of the full pipeline configuration used for training.
    pub config_fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn untrained(model: NetModel) -> Self {
        Checkpoint {
            model,
            epoch: 0,
            lr_state: None,
            adam: None,
            preprocess_fingerprint: None,
            config_fingerprint: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    seed: u64,
    epoch: usize,
    segments: Vec<Segment>,
    lr_state: Option<LRState>,
    adam_t: Option<u64>,
    preprocess_fingerprint: Option<String>,
    config_fingerprint: Option<String>,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ck.model.cfg.clone(),
        seed: ck.model.seed,
        epoch: ck.epoch,
        segments: ck.model.segments(),
        lr_state: ck.lr_state.clone(),
        adam_t: ck.adam.as_ref().map(|a| a.t),
        preprocess_fingerprint: ck.preprocess_fingerprint.clone(),
        config_fingerprint: ck.config_fingerprint.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = ck.model.params.len();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f64s(&mut out, &ck.model.params);
    if let Some(a) = &ck.adam {
        if a.m.len() != n || a.v.len() != n {
            return Err(NetError::Checkpoint("adam moments do not match the parameter count".into()));
        }
        put_f64s(&mut out, &a.m);
        put_f64s(&mut out, &a.v);
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(NetError::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn get_f64s(bytes: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
    let raw = take(bytes, n * 8, what)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(NetError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)?;
    header.config.validate()?;
    let n = header.segments.last().map_or(0, |s| s.offset + s.len);
    let params = get_f64s(&mut bytes, n, "parameters")?;
    let model = NetModel::from_params(header.config, header.seed, params)?;
    if model.segments() != header.segments {
        return Err(NetError::Checkpoint("segment table does not match the stored configuration".into()));
    }
    let adam = match header.adam_t {
        Some(t) => Some(AdamState {
            m: get_f64s(&mut bytes, n, "adam m")?,
            v: get_f64s(&mut bytes, n, "adam v")?,
            t,
        }),
        None => None,
    };
    if !bytes.is_empty() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    Ok(Checkpoint {
        model,
        epoch: header.epoch,
        lr_state: header.lr_state,
        adam,
        preprocess_fingerprint: header.preprocess_fingerprint,
        config_fingerprint: header.config_fingerprint,
    })
}

pub fn save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ck)?;
    let mut f = std::fs::File::create(path).map_err(|e| NetError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| NetError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NetError::io(path, e))?;
    from_bytes(&bytes)
}
