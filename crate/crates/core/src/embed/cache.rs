//! On-disk response cache.
//!
//! Layout: `{root}/{backend}/{model}/{sha256(content)}.bin`. Each entry is a
//! 16-byte header (`b"USEC"`, u16 version, u16 payload kind, u64 length)
//! followed by the payload: little-endian f64 values for embeddings, UTF-8
//! bytes for completions. Writes go to a temp file in the same directory and
//! are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"USEC";
const VERSION: u16 = 1;
const KIND_VECTOR: u16 = 0;
const KIND_TEXT: u16 = 1;
const HEADER_LEN: usize = 16;

pub fn sha256_hex(content: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(content.as_ref()))
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, backend: &str, model: &str, content: &str) -> PathBuf {
        self.root
            .join(sanitize(backend))
            .join(sanitize(model))
            .join(format!("{}.bin", sha256_hex(content)))
    }

    pub fn get_vector(&self, backend: &str, model: &str, content: &str) -> Option<Vec<f64>> {
        let bytes = fs::read(self.entry_path(backend, model, content)).ok()?;
        let payload = check_header(&bytes, KIND_VECTOR)?;
        if payload.len() % 8 != 0 {
            return None;
        }
        Some(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }

    pub fn put_vector(
        &self,
        backend: &str,
        model: &str,
        content: &str,
        values: &[f64],
    ) -> std::io::Result<()> {
        let mut bytes = header(KIND_VECTOR, values.len() as u64);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.write_atomic(&self.entry_path(backend, model, content), &bytes)
    }

    pub fn get_text(&self, backend: &str, model: &str, content: &str) -> Option<String> {
        let bytes = fs::read(self.entry_path(backend, model, content)).ok()?;
        let payload = check_header(&bytes, KIND_TEXT)?;
        String::from_utf8(payload.to_vec()).ok()
    }

    pub fn put_text(&self, backend: &str, model: &str, content: &str, text: &str) -> std::io::Result<()> {
        let mut bytes = header(KIND_TEXT, text.len() as u64);
        bytes.extend_from_slice(text.as_bytes());
        self.write_atomic(&self.entry_path(backend, model, content), &bytes)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        let dir = path.parent().expect("cache entries live in a directory");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

fn header(kind: u16, len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out
}

fn check_header(bytes: &[u8], kind: u16) -> Option<&[u8]> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return None;
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let stored_kind = u16::from_le_bytes([bytes[6], bytes[7]]);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if version != VERSION || stored_kind != kind {
        return None;
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = if kind == KIND_VECTOR { len * 8 } else { len };
    (payload.len() == expected).then_some(payload)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}
