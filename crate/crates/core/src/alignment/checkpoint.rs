//! `VLCK` checkpoints.
//!
//! Layout: magic `VLCK`, u32 LE version, u32 LE length + UTF-8 config JSON,
//! then tensor records (u32 LE name length, name, `EMBD` tensor) up to the
//! trailer: u64 LE step counter and a CRC-32 of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{AlignmentState, Moments, LOGIT_SCALE};
use crate::backbone::EncoderPipeline;
use crate::error::{Error, Result};
use crate::numerics::{encode_embd, read_embd_from, ByteReader, Tensor};

pub const VLCK_MAGIC: &[u8; 4] = b"VLCK";
pub const VLCK_VERSION: u32 = 1;
const TRAILER_LEN: usize = 8 + 4;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    /// Named tensors in file order.
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VLCK_MAGIC);
    out.extend_from_slice(&VLCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config_json.as_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_embd(t));
    }
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], source_name: &str) -> Result<Checkpoint> {
    let parse_err = |location: String, detail: String| Error::Parse {
        source_name: source_name.to_string(),
        location,
        detail,
    };
    if bytes.len() < 12 + TRAILER_LEN {
        return Err(parse_err(
            format!("byte offset {}", bytes.len()),
            "file too short for a checkpoint".into(),
        ));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(parse_err(
            format!("byte offset {body_len}"),
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let tensor_end = bytes.len() - TRAILER_LEN;
    let mut r = ByteReader::new(&bytes[..tensor_end], source_name);
    r.magic(VLCK_MAGIC)?;
    let version = r.u32()?;
    if version != VLCK_VERSION {
        return Err(r.error(format!("unsupported VLCK version {version}")));
    }
    let len = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(len)?)
        .map_err(|e| r.error(format!("config blob is not UTF-8: {e}")))?
        .to_string();
    let mut tensors = Vec::new();
    while r.remaining() > 0 {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| r.error(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        tensors.push((name, read_embd_from(&mut r)?));
    }
    let step = u64::from_le_bytes(bytes[tensor_end..body_len].try_into().expect("8 bytes"));
    Ok(Checkpoint {
        config_json,
        tensors,
        step,
    })
}

/// Snapshot of every pipeline tensor, the temperature and the optimizer moments.
pub fn snapshot(
    config_json: &str,
    pipe: &EncoderPipeline,
    state: &AlignmentState,
) -> Result<Checkpoint> {
    let mut tensors = Vec::with_capacity(pipe.params.len() + 2 * state.moments.len() + 1);
    for (name, t) in pipe.params.iter() {
        tensors.push((format!("{PARAM}{name}"), t.clone()));
    }
    tensors.push((
        format!("{PARAM}{LOGIT_SCALE}"),
        Tensor::new(vec![1], vec![state.log_logit_scale])?,
    ));
    for (name, mom) in &state.moments {
        let n = mom.m.len();
        tensors.push((
            format!("{ADAM_M}{name}"),
            Tensor::new(vec![n], mom.m.clone())?,
        ));
        tensors.push((
            format!("{ADAM_V}{name}"),
            Tensor::new(vec![n], mom.v.clone())?,
        ));
    }
    Ok(Checkpoint {
        config_json: config_json.to_string(),
        tensors,
        step: state.step,
    })
}

/// Overwrites `pipe` and `state` from `ckpt`. `pipe` must already have the
/// checkpoint's configuration; every tensor must be present with a matching shape.
pub fn restore(
    ckpt: &Checkpoint,
    pipe: &mut EncoderPipeline,
    state: &mut AlignmentState,
) -> Result<()> {
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in &ckpt.tensors {
        let (map, key) = if let Some(k) = name.strip_prefix(PARAM) {
            (&mut params, k)
        } else if let Some(k) = name.strip_prefix(ADAM_M) {
            (&mut m, k)
        } else if let Some(k) = name.strip_prefix(ADAM_V) {
            (&mut v, k)
        } else {
            return Err(Error::Data(format!("unknown checkpoint record `{name}`")));
        };
        map.insert(key.to_string(), t);
    }
    let names: Vec<String> = pipe.params.names().map(str::to_string).collect();
    for name in &names {
        let t = params
            .remove(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{name}`")))?;
        let slot = pipe.params.get_mut(name).expect("name from store");
        if slot.shape() != t.shape() {
            return Err(Error::Data(format!(
                "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    let ls = params
        .remove(LOGIT_SCALE)
        .ok_or_else(|| Error::Data("checkpoint lacks the logit scale".into()))?;
    if let Some(extra) = params.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint parameter `{extra}` is not in the model"
        )));
    }
    let mut moments = BTreeMap::new();
    for (name, mt) in m {
        let vt = v
            .remove(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks second moment of `{name}`")))?;
        moments.insert(
            name,
            Moments {
                m: mt.data().to_vec(),
                v: vt.data().to_vec(),
            },
        );
    }
    if let Some(extra) = v.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint lacks first moment of `{extra}`"
        )));
    }
    state.log_logit_scale = ls.item()?;
    state.moments = moments;
    state.step = ckpt.step;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    config_json: &str,
    pipe: &EncoderPipeline,
    state: &AlignmentState,
) -> Result<()> {
    let bytes = encode_checkpoint(&snapshot(config_json, pipe, state)?);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// SHA-256 (hex) of the encoded checkpoint of `(pipe, state)`.
pub fn state_hash(
    config_json: &str,
    pipe: &EncoderPipeline,
    state: &AlignmentState,
) -> Result<String> {
    let bytes = encode_checkpoint(&snapshot(config_json, pipe, state)?);
    Ok(hex::encode(Sha256::digest(&bytes)))
}
