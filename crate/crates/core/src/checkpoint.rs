//! Self-describing named-tensor archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (dtype, kind, counters, config snapshot, tensor index), the
//! little-endian payload, and a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::FinetuneState;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParameterSet;
use crate::pretrain::TwinState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BDACKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

const TEACHER: &str = "teacher.";
const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";
const CENTER: &str = "state.center";
const LOSS_WEIGHTS: &str = "state.loss_weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Stage-1 twin state.
    Pretrain,
    /// Stage-2 encoder plus segmentation head.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    kind: CheckpointKind,
    step: u64,
    total_steps: u64,
    optim_t: u64,
    config: String,
    tensors: Vec<IndexEntry>,
}

/// In-memory archive.
///
/// Tensor names: `encoder.*`, `projector.*`, `decoder.*`, `head.*` for model
/// parameters, `teacher.*` for the EMA copy, `optim.m.*` / `optim.v.*` for
/// optimizer moments, `state.center` and `state.loss_weights`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub kind: CheckpointKind,
    pub step: u64,
    pub total_steps: u64,
    pub optim_t: u64,
    /// Resolved run configuration as TOML.
    pub config: String,
    pub tensors: ParameterSet<S>,
}

fn prefixed<S: Scalar>(prefix: &str, ps: &ParameterSet<S>) -> ParameterSet<S> {
    let mut out = ParameterSet::new();
    for (k, v) in ps.iter() {
        out.insert(format!("{prefix}{k}"), v.clone());
    }
    out
}

fn strip<S: Scalar>(prefix: &str, ps: &ParameterSet<S>) -> ParameterSet<S> {
    let mut out = ParameterSet::new();
    for (k, v) in ps.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.insert(rest, v.clone());
        }
    }
    out
}

fn model_params<S: Scalar>(ps: &ParameterSet<S>) -> ParameterSet<S> {
    let mut out = ParameterSet::new();
    for p in ["encoder.", "projector.", "decoder.", "head."] {
        out.extend(ps.filter_prefix(p));
    }
    out
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_twin(state: &TwinState<S>, config: String) -> Self {
        let mut t = state.student.clone();
        t.extend(state.decoder.clone());
        t.extend(prefixed(TEACHER, &state.teacher));
        t.extend(prefixed(OPT_M, &state.optimizer.m));
        t.extend(prefixed(OPT_V, &state.optimizer.v));
        t.insert(CENTER, Tensor::from_parts(&[state.center.len()], state.center.clone()));
        t.insert(LOSS_WEIGHTS, Tensor::from_parts(&[2], state.loss_weights.to_vec()));
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            step: state.step,
            total_steps: state.total_steps,
            optim_t: state.optimizer.t,
            config,
            tensors: t,
        }
    }

    /// Rebuild the twin state; `lr` seeds the optimizer's learning rate.
    pub fn to_twin(&self, lr: f64) -> Result<TwinState<S>> {
        self.expect_kind(CheckpointKind::Pretrain)?;
        let t = &self.tensors;
        let mut student = t.filter_prefix("encoder.");
        student.extend(t.filter_prefix("projector."));
        let center = self.required(CENTER)?.data().to_vec();
        let lw = self.required(LOSS_WEIGHTS)?.data().to_vec();
        if lw.len() != 2 {
            return Err(Error::Integrity(format!("{LOSS_WEIGHTS} has {} entries", lw.len())));
        }
        let mut optimizer = Adam::new(lr);
        optimizer.t = self.optim_t;
        optimizer.m = strip(OPT_M, t);
        optimizer.v = strip(OPT_V, t);
        Ok(TwinState {
            teacher: strip(TEACHER, t),
            student,
            decoder: t.filter_prefix("decoder."),
            center,
            loss_weights: [lw[0], lw[1]],
            step: self.step,
            total_steps: self.total_steps,
            optimizer,
        })
    }

    pub fn from_finetune(state: &FinetuneState<S>, config: String) -> Self {
        let mut t = state.params();
        t.extend(prefixed(OPT_M, &state.optimizer.m));
        t.extend(prefixed(OPT_V, &state.optimizer.v));
        Checkpoint {
            kind: CheckpointKind::Finetune,
            step: state.step,
            total_steps: state.step,
            optim_t: state.optimizer.t,
            config,
            tensors: t,
        }
    }

    pub fn to_finetune(&self, lr: f64) -> Result<FinetuneState<S>> {
        self.expect_kind(CheckpointKind::Finetune)?;
        let mut optimizer = Adam::new(lr);
        optimizer.t = self.optim_t;
        optimizer.m = strip(OPT_M, &self.tensors);
        optimizer.v = strip(OPT_V, &self.tensors);
        Ok(FinetuneState {
            encoder: self.tensors.filter_prefix("encoder."),
            head: self.tensors.filter_prefix("head."),
            optimizer,
            step: self.step,
        })
    }

    /// Model parameters only (`encoder.*`, `projector.*`, `decoder.*`, `head.*`).
    /// For a stage-1 archive these are the student's weights.
    pub fn model_params(&self) -> ParameterSet<S> {
        model_params(&self.tensors)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn required(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors.get(name).ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.num_elements() * S::BYTES);
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            index.push(IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: S::DTYPE.to_string(),
            kind: self.kind,
            step: self.step,
            total_steps: self.total_steps,
            optim_t: self.optim_t,
            config: self.config.clone(),
            tensors: index,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: String| Error::Integrity(m);
        if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
            return Err(integrity(format!("file is {} bytes, shorter than the fixed framing", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(integrity("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body_end = bytes.len() - DIGEST_LEN;
        let header_end = (PREAMBLE_LEN as u64).checked_add(header_len).filter(|&e| e <= body_end as u64);
        let Some(header_end) = header_end else {
            return Err(integrity(format!("header length {header_len} exceeds file")));
        };
        let header_end = header_end as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| integrity(format!("header: {e}")))?;
        let payload = &bytes[header_end..body_end];
        let expected: u64 = header.tensors.iter().map(|e| e.nbytes).sum();
        if payload.len() as u64 != expected {
            return Err(integrity(format!("payload is {} bytes, index expects {expected}", payload.len())));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(integrity("checksum mismatch".into()));
        }
        if header.format_version != version {
            return Err(integrity("header and preamble versions disagree".into()));
        }
        if header.dtype != S::DTYPE {
            return Err(Error::Config(format!("checkpoint dtype {} but {} was requested", header.dtype, S::DTYPE)));
        }
        let mut tensors = ParameterSet::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload.len() as u64);
            if e.nbytes != (n * S::BYTES) as u64 || end.is_none() {
                return Err(integrity(format!("index entry {} is inconsistent", e.name)));
            }
            if tensors.contains(&e.name) {
                return Err(integrity(format!("duplicate tensor {}", e.name)));
            }
            let raw = &payload[e.offset as usize..end.expect("checked") as usize];
            let data: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            tensors.insert(e.name.clone(), Tensor::from_parts(&e.shape, data));
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            total_steps: header.total_steps,
            optim_t: header.optim_t,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
