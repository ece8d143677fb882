//! Binary checkpoint layout:
//!
//! ```text
//! "DMSNCKPT" | u32 version | u64 header length | JSON header | f64 LE payload
//! ```
//!
//! The header carries run metadata and an index of `(key, shape, offset)`
//! entries into the payload, sorted by key. Array keys: `g1/*`,
//! `branch<i>/*`, `d_low/*`, `d_high<i>/*`, `velocity/<param key>` and
//! `lmb/<i>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::detector::SpindleDetector;
use crate::error::{DmsnError, Result};
use crate::params::ParamSet;
use crate::psl::LossMemoryBank;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMSNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    steps_per_epoch: usize,
    faulted_steps: usize,
    pseudo_initialized: bool,
    beta: Vec<f64>,
    num_sources: usize,
    has_pseudo: bool,
    arrays: Vec<ArrayEntry>,
    payload_sha256: String,
}

fn collect(state: &TrainState) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut put = |prefix: &str, set: &ParamSet| {
        for (k, t) in set.iter() {
            out.insert(format!("{prefix}/{k}"), t.clone());
        }
    };
    put("g1", &state.detector.g1);
    for (i, b) in state.detector.branches.iter().enumerate() {
        put(&format!("branch{i}"), b);
    }
    put("d_low", &state.d_low);
    for (i, d) in state.d_high.iter().enumerate() {
        put(&format!("d_high{i}"), d);
    }
    for (k, v) in &state.velocity {
        out.insert(format!("velocity/{k}"), v.clone());
    }
    for (i, vals) in state.lmb.snapshot().into_iter().enumerate() {
        let n = vals.len();
        out.insert(format!("lmb/{i}"), Tensor::from_vec(&[n], vals).expect("1-d"));
    }
    out
}

fn corrupt(path: &Path, reason: impl Into<String>) -> DmsnError {
    DmsnError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `state` to `path` and returns the sha256 of the file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<String> {
    let arrays = collect(state);
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(arrays.len());
    for (key, t) in &arrays {
        index.push(ArrayEntry {
            key: key.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() / 8,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        steps_per_epoch: state.steps_per_epoch,
        faulted_steps: state.faulted_steps,
        pseudo_initialized: state.pseudo_initialized,
        beta: state.beta.clone(),
        num_sources: state.detector.num_sources,
        has_pseudo: state.detector.has_pseudo,
        arrays: index,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + hjson.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&hjson);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DmsnError::io(dir, e))?;
    }
    // write-then-rename keeps a valid file at `path` if the run dies mid-write
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| DmsnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DmsnError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DmsnError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| DmsnError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DmsnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, e.to_string()))?;
    let payload = &body[hlen..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    if payload.len() % 8 != 0 {
        return Err(corrupt(path, "payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > values.len() {
            return Err(corrupt(path, format!("array {} runs past the payload", e.key)));
        }
        arrays.insert(e.key.clone(), Tensor::from_vec(&e.shape, values[e.offset..end].to_vec())?);
    }

    let config = header.config;
    config.validate()?;
    let take = |prefix: &str| -> ParamSet {
        let mut set = ParamSet::new();
        let p = format!("{prefix}/");
        for (k, t) in &arrays {
            if let Some(rest) = k.strip_prefix(&p) {
                set.insert(rest, t.clone());
            }
        }
        set
    };
    let n_branches = header.num_sources + usize::from(header.has_pseudo);
    let branches: Vec<ParamSet> = (0..n_branches).map(|i| take(&format!("branch{i}"))).collect();
    let detector = SpindleDetector::from_parts(
        config.detector.clone(),
        take("g1"),
        branches,
        header.num_sources,
        header.has_pseudo,
    )?;
    // a fresh state gives the expected key and shape layout
    let fresh = TrainState::new(&config, header.steps_per_epoch.max(1))?;
    fresh.detector.g1.check_compatible(&detector.g1)?;
    for (a, b) in fresh.detector.branches.iter().zip(&detector.branches) {
        a.check_compatible(b)
            .map_err(|e| DmsnError::Checkpoint(format!("branch layout does not match config: {e}")))?;
    }
    let d_low = take("d_low");
    fresh.d_low.check_compatible(&d_low)?;
    let d_high: Vec<ParamSet> = (0..header.num_sources).map(|i| take(&format!("d_high{i}"))).collect();
    for (a, b) in fresh.d_high.iter().zip(&d_high) {
        a.check_compatible(b)?;
    }
    let mut velocity = BTreeMap::new();
    for (k, t) in &arrays {
        if let Some(rest) = k.strip_prefix("velocity/") {
            velocity.insert(rest.to_string(), t.clone());
        }
    }
    let lmb_contents: Vec<Vec<f64>> = (0..header.num_sources)
        .map(|i| arrays.get(&format!("lmb/{i}")).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();
    let lmb = LossMemoryBank::restore(config.lmb_capacity, lmb_contents)?;
    Ok(TrainState {
        config,
        detector,
        d_low,
        d_high,
        velocity,
        lmb,
        step: header.step,
        steps_per_epoch: header.steps_per_epoch,
        faulted_steps: header.faulted_steps,
        pseudo_initialized: header.pseudo_initialized,
        beta: header.beta,
    })
}
