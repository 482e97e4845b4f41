//! Binary checkpoint container.
//!
//! Layout: `b"USPL"`, `u32` version, `u32` header length, a JSON header,
//! then every tensor as little-endian `f64` in header order. The header
//! carries the SHA-256 of the tensor section, so a cut-off or edited tensor
//! section fails the checksum. All integers are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llmeg::{ModelDims, ModelParams};
use crate::optim::{AdamWState, ParamSet};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"USPL";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this reader supports {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor section checksum mismatch (expected {expected}, got {actual})")]
    Checksum { expected: String, actual: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint holds a '{found}' model, expected '{expected}'")]
    Kind { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named tensors plus free-form metadata; the unit the file format stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Map<String, Value>,
    pub tensors: Vec<(TensorSpec, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorSpec>,
    tensor_sha256: String,
    #[serde(flatten)]
    meta: Map<String, Value>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorSpec {
                name: name.into(),
                shape,
            },
            data,
        ));
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(s, _)| s.name == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| CheckpointError::Header(format!("missing field '{key}'")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| CheckpointError::Header(format!("field '{key}': {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind {
                expected: kind.into(),
                found: self.kind.clone(),
            })
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut body = Vec::with_capacity(8 * self.tensors.iter().map(|(_, d)| d.len()).sum::<usize>());
        for (_, data) in &self.tensors {
            for x in data {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            tensors: self.tensors.iter().map(|(s, _)| s.clone()).collect(),
            tensor_sha256: hex::encode(Sha256::digest(&body)),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&body)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        read_exact(&mut r, &mut word, "header length")?;
        let header_len = u32::from_le_bytes(word);
        if header_len > MAX_HEADER {
            return Err(CheckpointError::Header(format!("header length {header_len} is implausible")));
        }
        let mut header = vec![0u8; header_len as usize];
        read_exact(&mut r, &mut header, "header")?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let actual = hex::encode(Sha256::digest(&body));
        if actual != header.tensor_sha256 {
            return Err(CheckpointError::Checksum {
                expected: header.tensor_sha256,
                actual,
            });
        }
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(CheckpointError::Header(format!(
                "tensor section has {} bytes, header declares {}",
                body.len(),
                total * 8
            )));
        }
        let mut floats = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let tensors = header
            .tensors
            .into_iter()
            .map(|spec| {
                let n = spec.shape.iter().product();
                let data: Vec<f64> = floats.by_ref().take(n).collect();
                (spec, data)
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        self.write_to(BufWriter::new(tmp.as_file_mut()))?;
        tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

/// Row-major shapes of the tensors in [`ParamSet::tensors`] order.
pub fn param_shapes(params: &ModelParams) -> Vec<Vec<usize>> {
    let mut shapes = vec![
        params.w1.shape().to_vec(),
        params.w2.shape().to_vec(),
        params.eta.shape().to_vec(),
    ];
    for layer in &params.decoder {
        shapes.push(layer.weight.shape().to_vec());
        shapes.push(layer.bias.shape().to_vec());
    }
    shapes
}

const LLMEG_KIND: &str = "llmeg";

/// A selection-model snapshot with optimizer state and run config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: AdamWState, config: TrainConfig) -> Self {
        Self {
            params,
            optimizer,
            config,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn dims(&self) -> &ModelDims {
        &self.params.dims
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(LLMEG_KIND);
        c.meta.insert("dims".into(), serde_json::to_value(&self.params.dims).expect("dims serialize"));
        c.meta.insert("config".into(), serde_json::to_value(&self.config).expect("config serialize"));
        c.meta.insert("seed".into(), self.config.seed.into());
        c.meta.insert("step".into(), self.optimizer.step.into());
        let has_moments = !self.optimizer.m.is_empty();
        c.meta.insert("optimizer".into(), has_moments.into());
        let names = self.params.tensor_names();
        let shapes = param_shapes(&self.params);
        for ((name, shape), data) in names.iter().zip(&shapes).zip(self.params.tensors()) {
            c.push(name.clone(), shape.clone(), data.to_vec());
        }
        if has_moments {
            for (prefix, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
                for ((name, shape), data) in names.iter().zip(&shapes).zip(moments) {
                    c.push(format!("{prefix}.{name}"), shape.clone(), data.clone());
                }
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        c.expect_kind(LLMEG_KIND)?;
        let dims: ModelDims = c.meta_field("dims")?;
        let config: TrainConfig = c.meta_field("config")?;
        let step: u64 = c.meta_field("step")?;
        let has_moments: bool = c.meta_field("optimizer")?;
        dims.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut params = ModelParams::zeros(dims);
        let names = params.tensor_names();
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>, CheckpointError> {
            let data = c
                .tensor(name)
                .ok_or_else(|| CheckpointError::Header(format!("missing tensor '{name}'")))?;
            if data.len() != len {
                return Err(CheckpointError::Header(format!(
                    "tensor '{name}' has {} values, expected {len}",
                    data.len()
                )));
            }
            Ok(data.to_vec())
        };
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        for ((dst, name), &len) in params.tensors_mut().into_iter().zip(&names).zip(&lens) {
            dst.copy_from_slice(&fetch(name, len)?);
        }
        let optimizer = if has_moments {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (name, &len) in names.iter().zip(&lens) {
                m.push(fetch(&format!("adam.m.{name}"), len)?);
                v.push(fetch(&format!("adam.v.{name}"), len)?);
            }
            AdamWState { step, m, v }
        } else {
            AdamWState {
                step,
                ..AdamWState::default()
            }
        };
        Ok(Self {
            params,
            optimizer,
            config,
        })
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), CheckpointError> {
        self.to_container().write_to(w)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, CheckpointError> {
        Self::from_container(&Container::read_from(r)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_container(&Container::load(path)?)
    }
}
