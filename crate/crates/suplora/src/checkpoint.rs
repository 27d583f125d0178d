//! Checkpoint files.
//!
//! ```text
//! "SUPL1" | u64 LE manifest length | manifest JSON | zero padding | tensors
//! ```
//!
//! Every tensor starts on a 64-byte file offset, in manifest order, little
//! endian. Manifest offsets count from the start of the file. Reading a file
//! and writing it again reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Layer, SubspaceMeta, SuploraAdapter, Variant};
use crate::denoiser::{DenoiserParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::world::NoiseSchedule;

pub const MAGIC: &[u8; 5] = b"SUPL1";
pub const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub data: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

fn pad_to(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: "<bytes>".into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Stores `data`; `F32` tensors are rounded now so the in-memory copy
    /// matches what a reader will see.
    pub fn push(&mut self, name: &str, dtype: DType, data: &Matrix) {
        let data = match dtype {
            DType::F64 => data.clone(),
            DType::F32 => {
                let v = data.as_slice().iter().map(|x| *x as f32 as f64).collect();
                Matrix::from_vec(data.rows(), data.cols(), v).expect("same shape")
            }
        };
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            dtype,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.data)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| bad(format!("missing meta field `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| bad(format!("meta field `{key}`: {e}")))
    }

    /// Offsets depend on the manifest length, which depends on the offsets;
    /// iterate until the layout is stable.
    fn manifest(&self) -> (Manifest, Vec<u8>) {
        let mut start = 0usize;
        loop {
            let mut offset = start;
            let mut entries = Vec::with_capacity(self.tensors.len());
            for t in &self.tensors {
                entries.push(TensorEntry {
                    name: t.name.clone(),
                    shape: [t.data.rows(), t.data.cols()],
                    dtype: t.dtype,
                    offset: offset as u64,
                });
                offset = pad_to(offset + t.data.as_slice().len() * t.dtype.width());
            }
            let m = Manifest {
                kind: self.kind.clone(),
                config_hash: self.config_hash.clone(),
                seed: self.seed,
                meta: self.meta.clone(),
                tensors: entries,
            };
            let json = serde_json::to_vec(&m).expect("manifest serializes");
            let payload_start = pad_to(MAGIC.len() + 8 + json.len());
            if payload_start == start {
                return (m, json);
            }
            start = payload_start;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, json) = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (entry, t) in m.tensors.iter().zip(&self.tensors) {
            out.resize(entry.offset as usize, 0);
            for x in t.data.as_slice() {
                match t.dtype {
                    DType::F32 => out.extend_from_slice(&(*x as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        out.resize(pad_to(out.len()), 0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a SUPL1 checkpoint"));
        }
        let len_bytes: [u8; 8] = bytes[5..13].try_into().expect("8 bytes");
        let len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(13..13 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let raw = bytes
                .get(start..start + n * e.dtype.width())
                .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let data: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let data = Matrix::from_vec(e.shape[0], e.shape[1], data)
                .map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push(NamedTensor {
                name: e.name.clone(),
                dtype: e.dtype,
                data,
            });
        }
        Ok(Self {
            kind: m.kind,
            config_hash: m.config_hash,
            seed: m.seed,
            meta: m.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Denoiser weights in f32 plus the noise schedule in f64.
pub fn denoiser_checkpoint(params: &DenoiserParams, config_hash: &str, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new("denoiser", config_hash, seed);
    for (name, m) in TENSOR_NAMES.iter().zip(params.tensors()) {
        ck.push(name, DType::F32, m);
    }
    let betas = Matrix::from_vec(1, params.schedule.steps(), params.schedule.betas.clone())
        .expect("finite betas");
    ck.push("betas", DType::F64, &betas);
    ck
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserParams> {
    if ck.kind != "denoiser" {
        return Err(bad(format!(
            "expected a denoiser checkpoint, found `{}`",
            ck.kind
        )));
    }
    let tensors = TENSOR_NAMES
        .iter()
        .map(|n| ck.tensor(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_betas(ck.tensor("betas")?.as_slice().to_vec());
    DenoiserParams::from_tensors(tensors, schedule)
}

/// Adapters are stored in f64 so the orthogonality of `B` to the supertype
/// subspace survives a reload at full precision.
pub fn adapter_checkpoint(adapter: &SuploraAdapter, config_hash: &str, seed: u64) -> Checkpoint {
    let mut ck = Checkpoint::new("adapter", config_hash, seed);
    ck.meta.insert("group_id".into(), adapter.group_id.into());
    ck.meta.insert(
        "layer".into(),
        serde_json::to_value(adapter.layer).expect("enum"),
    );
    ck.meta.insert(
        "variant".into(),
        serde_json::to_value(adapter.variant).expect("enum"),
    );
    ck.push("A", DType::F64, &adapter.a);
    ck.push("B", DType::F64, &adapter.b);
    if let Some(s) = &adapter.subspace {
        ck.meta.insert("r_s".into(), s.r_s.into());
        ck.meta
            .insert("capture_ratio".into(), s.capture_ratio.into());
        ck.meta
            .insert("supertype_id".into(), s.supertype_id.clone().into());
        ck.push("S", DType::F64, &s.basis);
    }
    ck
}

pub fn adapter_from_checkpoint(ck: &Checkpoint) -> Result<SuploraAdapter> {
    if ck.kind != "adapter" {
        return Err(bad(format!(
            "expected an adapter checkpoint, found `{}`",
            ck.kind
        )));
    }
    let a = ck.tensor("A")?.clone();
    let b = ck.tensor("B")?.clone();
    if a.cols() != b.rows() {
        return Err(bad(format!(
            "A is {:?} but B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let subspace = if ck.meta.contains_key("r_s") {
        Some(SubspaceMeta {
            r_s: ck.meta_field("r_s")?,
            capture_ratio: ck.meta_field("capture_ratio")?,
            supertype_id: ck.meta_field("supertype_id")?,
            basis: ck.tensor("S")?.clone(),
        })
    } else {
        None
    };
    Ok(SuploraAdapter {
        group_id: ck.meta_field("group_id")?,
        layer: ck.meta_field::<Layer>("layer")?,
        variant: ck.meta_field::<Variant>("variant")?,
        a,
        b,
        subspace,
    })
}
