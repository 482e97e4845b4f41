//! Text embedding and chat-completion backends.
//!
//! Two embedders share the [`Embedder`] trait: [`HashingEmbedder`], a
//! deterministic bag-of-tokens model used offline and in tests, and
//! [`RemoteBackend`], an OpenAI-compatible HTTP client with an on-disk cache.
//! Completions go through [`ChatModel`], implemented by the remote backend
//! and by [`ScriptedChat`], a fixed prompt-to-response table.

mod cache;
mod hashing;
mod remote;

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{sha256_hex, DiskCache};
pub use hashing::{cosine, hashing_embed, tokenize};
pub use remote::{HttpResponse, HttpTransport, RemoteBackend, ReqwestTransport, API_KEY_ENV};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    EmptyInput,
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("request to {url} failed after {attempts} attempt(s): {detail}")]
    Transport {
        url: String,
        attempts: u32,
        detail: String,
    },
    #[error("request to {url} returned status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("malformed response from {url}: {detail}")]
    Malformed { url: String, detail: String },
    #[error("embedding rows have inconsistent or non-finite values: {0}")]
    BadEmbedding(String),
    #[error("no scripted response for prompt (sha256 {0})")]
    NoScriptedResponse(String),
    #[error("cache I/O: {0}")]
    Cache(std::io::Error),
    #[error("reading script table: {0}")]
    Script(String),
}

/// Row-major matrix of embeddings, one row per input text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EmbedError::BadEmbedding("rows differ in width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EmbedError::BadEmbedding("non-finite entry".into()));
        }
        let n = rows.len();
        let data = Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect())
            .expect("shape checked above");
        Ok(Self { data })
    }

    pub fn from_array(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError>;

    /// Output width when known ahead of time.
    fn dim(&self) -> Option<usize>;
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, EmbedError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Hashing width.
    pub dim: usize,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    /// Total attempts per request.
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Hashing,
            dim: 256,
            endpoint: "http://127.0.0.1:8000".into(),
            model: "nomic-embed-text-v1.5".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            cache_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn hashing(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn remote_default() -> Self {
        Self {
            kind: BackendKind::Remote,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.kind == BackendKind::Hashing && self.dim < 8 {
            return Err(EmbedError::Config(format!(
                "hashing dim must be >= 8, got {}",
                self.dim
            )));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(EmbedError::Config("timeout must be positive".into()));
        }
        if self.kind == BackendKind::Remote && self.endpoint.is_empty() {
            return Err(EmbedError::Config("remote backend needs an endpoint".into()));
        }
        Ok(())
    }

    /// Builds the embedder this config describes.
    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Hashing => Box::new(HashingEmbedder::new(self.dim)),
            BackendKind::Remote => Box::new(RemoteBackend::new(self.clone())?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 8, "hashing dimension must be at least 8");
        Self { dim }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        EmbeddingMatrix::from_rows(texts.iter().map(|t| hashing_embed(t, self.dim)).collect())
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

/// Embeds `texts` with the backend described by `cfg`.
pub fn embed_texts(texts: &[String], cfg: &BackendConfig) -> Result<EmbeddingMatrix, EmbedError> {
    cfg.build_embedder()?.embed(texts)
}

/// Completion lookup keyed by the SHA-256 of the full prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedChat {
    table: HashMap<String, String>,
    fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Full prompt text; alternatively give `prompt_sha256`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub response: String,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, prompt: &str, response: impl Into<String>) -> &mut Self {
        self.table.insert(sha256_hex(prompt), response.into());
        self
    }

    pub fn with(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.register(prompt, response);
        self
    }

    /// Answer unknown prompts with `response` instead of failing.
    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn from_entries(entries: Vec<ScriptEntry>) -> Result<Self, EmbedError> {
        let mut table = HashMap::new();
        for (i, e) in entries.into_iter().enumerate() {
            let key = match (e.prompt, e.prompt_sha256) {
                (Some(p), _) => sha256_hex(&p),
                (None, Some(h)) => h.to_lowercase(),
                (None, None) => {
                    return Err(EmbedError::Script(format!(
                        "entry {i} has neither prompt nor prompt_sha256"
                    )))
                }
            };
            table.insert(key, e.response);
        }
        Ok(Self {
            table,
            fallback: None,
        })
    }

    /// Adds every entry of `other`; its responses win on conflicts.
    pub fn merge(&mut self, other: ScriptedChat) -> &mut Self {
        self.table.extend(other.table);
        if other.fallback.is_some() {
            self.fallback = other.fallback;
        }
        self
    }

    /// The table as hash-keyed entries, sorted by hash.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let mut out: Vec<ScriptEntry> = self
            .table
            .iter()
            .map(|(k, v)| ScriptEntry {
                prompt: None,
                prompt_sha256: Some(k.clone()),
                response: v.clone(),
            })
            .collect();
        out.sort_by(|a, b| a.prompt_sha256.cmp(&b.prompt_sha256));
        out
    }

    /// Reads a JSON array of [`ScriptEntry`].
    pub fn from_json_str(source: &str) -> Result<Self, EmbedError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(source).map_err(|e| EmbedError::Script(e.to_string()))?;
        Self::from_entries(entries)
    }
}

impl ChatModel for ScriptedChat {
    fn complete(&self, prompt: &str) -> Result<String, EmbedError> {
        let key = sha256_hex(prompt);
        self.table
            .get(&key)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or(EmbedError::NoScriptedResponse(key))
    }
}

/// Sends `prompt` to `chat` and returns the raw completion.
pub fn chat_complete(prompt: &str, chat: &dyn ChatModel) -> Result<String, EmbedError> {
    chat.complete(prompt)
}
