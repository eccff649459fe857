//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `DFKDCKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header, then the raw
//! little-endian tensor payload. The header names the model kind, the
//! architecture descriptor, training metadata and every tensor's name,
//! shape and byte offset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{CnnSpec, StudentModel, TeacherModel, TinyCnn};
use super::generator::{Generator, GeneratorSpec};
use super::heads::{AuxClassifier, AuxSpec, Projector, ProjectorSpec};
use super::layers::Module;
use crate::error::{DfkdError, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    dtype: String,
    architecture: serde_json::Value,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

/// A named collection of tensors with a kind tag and architecture descriptor.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub metadata: CheckpointMetadata,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, architecture: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            architecture,
            metadata: CheckpointMetadata::default(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    /// Append every parameter and buffer of `module`, names prefixed.
    pub fn push_module<M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        let mut items = Vec::new();
        module.visit_params(&mut |n, t| items.push((format!("{prefix}{n}"), t.clone())));
        module.visit_buffers(&mut |n, t| items.push((format!("{prefix}{n}"), t.clone())));
        self.tensors.extend(items);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrite every parameter and buffer of `module` from `prefix`-named entries.
    pub fn restore_module<M: Module<T> + ?Sized>(
        &self,
        prefix: &str,
        module: &mut M,
        path: &Path,
    ) -> Result<()> {
        let index: BTreeMap<&str, &Tensor<T>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut assign = |n: &str, t: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}{n}");
            match index.get(key.as_str()) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                Some(src) => {
                    err = Some(format!(
                        "tensor `{key}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    ))
                }
                None => err = Some(format!("missing tensor `{key}`")),
            }
        };
        module.visit_params_mut(&mut assign);
        module.visit_buffers_mut(&mut assign);
        match err {
            Some(reason) => Err(DfkdError::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            format: "dfkd-checkpoint".into(),
            kind: self.kind.clone(),
            dtype: T::DTYPE.into(),
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| DfkdError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "stored as {}, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * T::BYTES;
            if end > payload.len() {
                return Err(corrupt(format!(
                    "tensor `{}` runs past the payload",
                    e.name
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            architecture: header.architecture,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Write atomically (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Models that can be rebuilt from their architecture descriptor.
pub trait Checkpointable<T: Scalar>: Module<T> + Sized {
    const KIND: &'static str;

    fn architecture(&self) -> serde_json::Value;

    /// A model with the described architecture and placeholder weights.
    fn from_architecture(arch: &serde_json::Value) -> Result<Self>;
}

fn placeholder_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn parse_arch<S: serde::de::DeserializeOwned>(arch: &serde_json::Value) -> Result<S> {
    Ok(serde_json::from_value(arch.clone())?)
}

impl<T: Scalar> Checkpointable<T> for TinyCnn<T> {
    const KIND: &'static str = "cnn";

    fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(self.spec()).expect("spec serializes")
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        TinyCnn::new(parse_arch::<CnnSpec>(arch)?, &mut placeholder_rng())
    }
}

impl<T: Scalar> Checkpointable<T> for TeacherModel<T> {
    const KIND: &'static str = "teacher";

    fn architecture(&self) -> serde_json::Value {
        self.net().architecture()
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        Ok(TeacherModel::new(TinyCnn::from_architecture(arch)?))
    }
}

impl<T: Scalar> Checkpointable<T> for StudentModel<T> {
    const KIND: &'static str = "student";

    fn architecture(&self) -> serde_json::Value {
        self.net().architecture()
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        Ok(StudentModel::new(TinyCnn::from_architecture(arch)?))
    }
}

impl<T: Scalar> Checkpointable<T> for Generator<T> {
    const KIND: &'static str = "generator";

    fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(self.spec()).expect("spec serializes")
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        Generator::new(parse_arch::<GeneratorSpec>(arch)?, &mut placeholder_rng())
    }
}

impl<T: Scalar> Checkpointable<T> for AuxClassifier<T> {
    const KIND: &'static str = "aux";

    fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(self.spec()).expect("spec serializes")
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        AuxClassifier::new(parse_arch::<AuxSpec>(arch)?, &mut placeholder_rng())
    }
}

impl<T: Scalar> Checkpointable<T> for Projector<T> {
    const KIND: &'static str = "projector";

    fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(self.spec()).expect("spec serializes")
    }

    fn from_architecture(arch: &serde_json::Value) -> Result<Self> {
        Ok(Projector::new(
            parse_arch::<ProjectorSpec>(arch)?,
            &mut placeholder_rng(),
        ))
    }
}

pub fn save_checkpoint<T: Scalar, M: Checkpointable<T>>(
    model: &M,
    path: &Path,
    metadata: CheckpointMetadata,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(M::KIND, model.architecture());
    ckpt.metadata = metadata;
    ckpt.push_module("", model);
    ckpt.write(path)
}

pub fn load_checkpoint<T: Scalar, M: Checkpointable<T>>(
    path: &Path,
) -> Result<(M, CheckpointMetadata)> {
    let ckpt = Checkpoint::<T>::read(path)?;
    if ckpt.kind != M::KIND {
        return Err(DfkdError::KindMismatch {
            path: path.to_path_buf(),
            expected: M::KIND.into(),
            found: ckpt.kind,
        });
    }
    let mut model =
        M::from_architecture(&ckpt.architecture).map_err(|e| DfkdError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("unusable architecture descriptor: {e}"),
        })?;
    ckpt.restore_module("", &mut model, path)?;
    Ok((model, ckpt.metadata))
}

/// [`load_checkpoint`] that also requires the stored architecture to equal `expected`.
pub fn load_checkpoint_expecting<T: Scalar, M: Checkpointable<T>>(
    path: &Path,
    expected: &serde_json::Value,
) -> Result<(M, CheckpointMetadata)> {
    let ckpt = Checkpoint::<T>::read(path)?;
    if ckpt.kind != M::KIND {
        return Err(DfkdError::KindMismatch {
            path: path.to_path_buf(),
            expected: M::KIND.into(),
            found: ckpt.kind,
        });
    }
    if &ckpt.architecture != expected {
        return Err(DfkdError::ArchitectureMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: ckpt.architecture.to_string(),
        });
    }
    let mut model = M::from_architecture(&ckpt.architecture)?;
    ckpt.restore_module("", &mut model, path)?;
    Ok((model, ckpt.metadata))
}
