//! Binary checkpoint container.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | dtype u8 | meta_len u64 | meta JSON |
//!  tensor blocks | sha256[32]`, where each tensor block is
//! `rank u32 | dims u64… | data`. Blocks hold parameters, then buffers, then
//! Adam first moments, then second moments. The digest covers every
//! preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, ModelKind, OutputScale};
use crate::nn::Vectorizer;
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CALNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance of the run that produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub train_config: TrainConfig,
    pub dataset_fingerprint: String,
    pub split_seed: u64,
    pub split_ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    arch: ArchConfig,
    output_scale: OutputScale,
    vectorizer: Option<Vectorizer>,
    run: Option<RunInfo>,
    epochs_done: usize,
    adam_t: u64,
    params: Vec<String>,
    buffers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub state: TrainState<T>,
    pub vectorizer: Option<Vectorizer>,
    pub run: Option<RunInfo>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&T::to_le_vec(t.data()));
}

pub fn encode<T: Scalar>(
    model: &Model<T>,
    state: &TrainState<T>,
    vectorizer: Option<&Vectorizer>,
    run: Option<&RunInfo>,
) -> Vec<u8> {
    let meta = Meta {
        kind: model.kind(),
        arch: model.config().clone(),
        output_scale: model.output_scale,
        vectorizer: vectorizer.cloned(),
        run: run.cloned(),
        epochs_done: state.epochs_done,
        adam_t: state.adam.t,
        params: model.store.params().iter().map(|p| p.name.clone()).collect(),
        buffers: model.store.buffers().iter().map(|b| b.name.clone()).collect(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.params() {
        put_tensor(&mut out, &p.tensor);
    }
    for b in model.store.buffers() {
        put_tensor(&mut out, &b.tensor);
    }
    for t in state.adam.m.iter().chain(&state.adam.v) {
        put_tensor(&mut out, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    state: &TrainState<T>,
    vectorizer: Option<&Vectorizer>,
    run: Option<&RunInfo>,
) -> Result<()> {
    let bytes = encode(model, state, vectorizer, run);
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ck_err("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(ck_err(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ck_err("tensor size overflows"))?;
        let bytes = n
            .checked_mul(T::PRECISION.bytes())
            .ok_or_else(|| ck_err("tensor size overflows"))?;
        let data = T::from_le_slice(self.take(bytes)?);
        Tensor::new(shape, data).map_err(|e| ck_err(e.to_string()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ck_err("not a checkpoint file (bad magic or too short)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ck_err("checksum mismatch; file is truncated or corrupted"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let tag = r.take(1)?[0];
    let precision = Precision::from_tag(tag).ok_or_else(|| ck_err(format!("unknown dtype tag {tag}")))?;
    if precision != T::PRECISION {
        return Err(ck_err(format!(
            "checkpoint holds {precision:?} values, requested {:?}",
            T::PRECISION
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| ck_err(format!("metadata: {e}")))?;

    let mut model = Model::<T>::build(meta.kind, &meta.arch, 0).map_err(|e| ck_err(e.to_string()))?;
    let names_match = model.store.params().iter().map(|p| &p.name).eq(meta.params.iter())
        && model.store.buffers().iter().map(|b| &b.name).eq(meta.buffers.iter());
    if !names_match {
        return Err(ck_err("parameter layout does not match the stored architecture"));
    }
    let np = meta.params.len();
    let params = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let buffers = (0..meta.buffers.len())
        .map(|_| r.tensor())
        .collect::<Result<Vec<_>>>()?;
    let m = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let v = (0..np).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(ck_err("trailing bytes after tensor data"));
    }
    for (i, (mi, vi)) in m.iter().zip(&v).enumerate() {
        if mi.shape() != params[i].shape() || vi.shape() != params[i].shape() {
            return Err(ck_err(format!(
                "optimizer moments of {} have the wrong shape",
                meta.params[i]
            )));
        }
    }
    model
        .store
        .replace_all(params, buffers)
        .map_err(|e| ck_err(e.to_string()))?;
    model.output_scale = meta.output_scale;
    Ok(Checkpoint {
        model,
        state: TrainState {
            adam: AdamState { t: meta.adam_t, m, v },
            epochs_done: meta.epochs_done,
        },
        vectorizer: meta.vectorizer,
        run: meta.run,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
