//! OpenAI-compatible HTTP client for `/v1/embeddings` and
//! `/v1/chat/completions`, with retries and the disk cache in front.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::cache::DiskCache;
use super::{normalize, BackendConfig, ChatModel, EmbedError, Embedder, EmbeddingMatrix};

pub const API_KEY_ENV: &str = "USPILOT_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal blocking POST-JSON transport, injectable for tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

/// Default transport backed by `reqwest`'s blocking client. The client is
/// created on first use so construction is safe inside an async runtime.
#[derive(Default)]
pub struct ReqwestTransport {
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let mut request = client.post(url).timeout(timeout).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Remote backend serving both embeddings and chat completions.
pub struct RemoteBackend {
    cfg: BackendConfig,
    transport: Arc<dyn HttpTransport>,
    cache: Option<DiskCache>,
    api_key: Option<String>,
    backoff: Duration,
    jitter: bool,
    network_calls: AtomicUsize,
}

impl RemoteBackend {
    /// Uses the reqwest transport and reads the API key from the environment.
    pub fn new(cfg: BackendConfig) -> Result<Self, EmbedError> {
        let key = std::env::var(API_KEY_ENV).ok();
        Ok(Self::with_transport(cfg, Arc::new(ReqwestTransport::default()))?.with_api_key(key))
    }

    pub fn with_transport(
        cfg: BackendConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let cache = cfg.cache_dir.as_ref().map(DiskCache::new);
        Ok(Self {
            cfg,
            transport,
            cache,
            api_key: None,
            backoff: Duration::from_millis(500),
            jitter: true,
            network_calls: AtomicUsize::new(0),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Base delay before the second attempt; doubles per retry. `jitter`
    /// adds up to 10% random extra delay.
    pub fn with_backoff(mut self, base: Duration, jitter: bool) -> Self {
        self.backoff = base;
        self.jitter = jitter;
        self
    }

    /// Requests that reached the transport (cache hits excluded).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    fn post_with_retries(&self, path: &str, body: &Value) -> Result<Value, EmbedError> {
        let url = self.url(path);
        let attempts = self.cfg.max_retries.max(1);
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 && !delay.is_zero() {
                let mut wait = delay;
                if self.jitter {
                    wait += delay.mul_f64(rand::rng().random_range(0.0..0.1));
                }
                std::thread::sleep(wait);
                delay *= 2;
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let timeout = Duration::from_secs_f64(self.cfg.timeout_secs);
            match self
                .transport
                .post_json(&url, self.api_key.as_deref(), body, timeout)
            {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| EmbedError::Malformed {
                        url: url.clone(),
                        detail: e.to_string(),
                    });
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("status {}: {}", resp.status, truncate(&resp.body));
                }
                Ok(resp) => {
                    return Err(EmbedError::Status {
                        url,
                        status: resp.status,
                        body: truncate(&resp.body),
                    })
                }
                Err(e) => last = e,
            }
            tracing::warn!(%url, attempt, error = %last, "remote request failed");
        }
        Err(EmbedError::Transport {
            url,
            attempts,
            detail: last,
        })
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

const EMBED_CACHE: &str = "remote";
const CHAT_CACHE: &str = "remote-chat";

impl Embedder for RemoteBackend {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let model = &self.cfg.model;
        let mut rows: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| self.cache.as_ref().and_then(|c| c.get_vector(EMBED_CACHE, model, t)))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| rows[i].is_none()).collect();
        if !missing.is_empty() {
            let inputs: Vec<&str> = missing.iter().map(|&i| texts[i].as_str()).collect();
            let url = self.url("/v1/embeddings");
            let value =
                self.post_with_retries("/v1/embeddings", &json!({"model": model, "input": inputs}))?;
            let parsed: EmbeddingResponse =
                serde_json::from_value(value).map_err(|e| EmbedError::Malformed {
                    url: url.clone(),
                    detail: e.to_string(),
                })?;
            if parsed.data.len() != missing.len() {
                return Err(EmbedError::Malformed {
                    url,
                    detail: format!(
                        "expected {} embeddings, got {}",
                        missing.len(),
                        parsed.data.len()
                    ),
                });
            }
            for (pos, item) in parsed.data.into_iter().enumerate() {
                let slot = item.index.unwrap_or(pos);
                let Some(&target) = missing.get(slot) else {
                    return Err(EmbedError::Malformed {
                        url,
                        detail: format!("embedding index {slot} out of range"),
                    });
                };
                if let Some(cache) = &self.cache {
                    cache
                        .put_vector(EMBED_CACHE, model, &texts[target], &item.embedding)
                        .map_err(EmbedError::Cache)?;
                }
                rows[target] = Some(item.embedding);
            }
        }
        let rows = rows
            .into_iter()
            .map(|r| {
                let mut v = r.ok_or_else(|| EmbedError::Malformed {
                    url: self.url("/v1/embeddings"),
                    detail: "response did not cover every input".into(),
                })?;
                normalize(&mut v);
                Ok(v)
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        EmbeddingMatrix::from_rows(rows)
    }

    fn dim(&self) -> Option<usize> {
        None
    }
}

impl ChatModel for RemoteBackend {
    fn complete(&self, prompt: &str) -> Result<String, EmbedError> {
        let model = &self.cfg.model;
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_text(CHAT_CACHE, model, prompt)) {
            return Ok(hit);
        }
        let url = self.url("/v1/chat/completions");
        let body = json!({"model": model, "messages": [{"role": "user", "content": prompt}]});
        let value = self.post_with_retries("/v1/chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|e| EmbedError::Malformed {
                url: url.clone(),
                detail: e.to_string(),
            })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| EmbedError::Malformed {
                url,
                detail: "no choices in completion".into(),
            })?;
        if let Some(cache) = &self.cache {
            cache
                .put_text(CHAT_CACHE, model, prompt, &text)
                .map_err(EmbedError::Cache)?;
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replays canned responses and records every request.
    struct FakeTransport {
        responses: Mutex<Vec<Result<HttpResponse, String>>>,
        requests: Mutex<Vec<(String, Value, Option<String>)>>,
    }

    impl FakeTransport {
        fn new(responses: Vec<Result<HttpResponse, String>>) -> Arc<Self> {
            Arc::new(Self {
                responses: Mutex::new(responses.into_iter().rev().collect()),
                requests: Mutex::new(Vec::new()),
            })
        }
    }

    impl HttpTransport for FakeTransport {
        fn post_json(
            &self,
            url: &str,
            api_key: Option<&str>,
            body: &Value,
            _timeout: Duration,
        ) -> Result<HttpResponse, String> {
            self.requests
                .lock()
                .unwrap()
                .push((url.to_string(), body.clone(), api_key.map(str::to_string)));
            self.responses
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err("no more responses".into()))
        }
    }

    fn ok(body: Value) -> Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: 200,
            body: body.to_string(),
        })
    }

    fn cfg(cache: Option<&std::path::Path>) -> BackendConfig {
        BackendConfig {
            endpoint: "http://llm.test/".into(),
            model: "embed-small".into(),
            cache_dir: cache.map(|p| p.to_path_buf()),
            ..BackendConfig::remote_default()
        }
    }

    fn backend(cfg: BackendConfig, t: Arc<FakeTransport>) -> RemoteBackend {
        RemoteBackend::with_transport(cfg, t)
            .unwrap()
            .with_backoff(Duration::ZERO, false)
            .with_api_key(Some("k".into()))
    }

    #[test]
    fn embeddings_wire_format_and_normalization() {
        let t = FakeTransport::new(vec![ok(json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]}
        ]}))]);
        let b = backend(cfg(None), t.clone());
        let m = b.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.6, 0.8]);
        assert_eq!(m.row(1).to_vec(), vec![0.0, 1.0]);
        let reqs = t.requests.lock().unwrap();
        assert_eq!(reqs[0].0, "http://llm.test/v1/embeddings");
        assert_eq!(reqs[0].1, json!({"model": "embed-small", "input": ["a", "b"]}));
        assert_eq!(reqs[0].2.as_deref(), Some("k"));
    }

    #[test]
    fn server_errors_are_retried_then_surface() {
        let err500 = || {
            Ok(HttpResponse {
                status: 500,
                body: "boom".into(),
            })
        };
        let t = FakeTransport::new(vec![err500(), err500(), err500()]);
        let b = backend(cfg(None), t.clone());
        match b.complete("hi").unwrap_err() {
            EmbedError::Transport { attempts, url, .. } => {
                assert_eq!(attempts, 3);
                assert!(url.ends_with("/v1/chat/completions"));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(b.network_calls(), 3);
    }

    #[test]
    fn retry_recovers_after_network_failure() {
        let t = FakeTransport::new(vec![
            Err("connection reset".into()),
            ok(json!({"choices": [{"message": {"role": "assistant", "content": "[]"}}]})),
        ]);
        let b = backend(cfg(None), t);
        assert_eq!(b.complete("p").unwrap(), "[]");
        assert_eq!(b.network_calls(), 2);
    }

    #[test]
    fn client_errors_fail_fast() {
        let t = FakeTransport::new(vec![Ok(HttpResponse {
            status: 401,
            body: "unauthorized".into(),
        })]);
        let b = backend(cfg(None), t);
        assert!(matches!(b.complete("p"), Err(EmbedError::Status { status: 401, .. })));
        assert_eq!(b.network_calls(), 1);
    }

    #[test]
    fn malformed_body_is_reported() {
        let t = FakeTransport::new(vec![ok(json!({"unexpected": true}))]);
        let b = backend(cfg(None), t);
        assert!(matches!(b.embed(&["x".into()]), Err(EmbedError::Malformed { .. })));
    }

    #[test]
    fn cache_hits_skip_the_network() {
        let dir = tempfile::tempdir().unwrap();
        let chat = json!({"choices": [{"message": {"content": "answer"}}]});
        let emb = json!({"data": [{"index": 0, "embedding": [1.0, 1.0]}]});
        let t = FakeTransport::new(vec![ok(chat), ok(emb)]);
        let b = backend(cfg(Some(dir.path())), t);
        assert_eq!(b.complete("q").unwrap(), "answer");
        let first = b.embed(&["t".into()]).unwrap();
        assert_eq!(b.network_calls(), 2);

        // Fresh backend over the same cache with a transport that always fails.
        let dead = FakeTransport::new(vec![]);
        let warm = backend(cfg(Some(dir.path())), dead);
        assert_eq!(warm.complete("q").unwrap(), "answer");
        assert_eq!(warm.embed(&["t".into()]).unwrap(), first);
        assert_eq!(warm.network_calls(), 0);
    }

    #[test]
    fn only_uncached_texts_are_requested() {
        let dir = tempfile::tempdir().unwrap();
        let t = FakeTransport::new(vec![
            ok(json!({"data": [{"embedding": [1.0, 0.0]}]})),
            ok(json!({"data": [{"embedding": [0.0, 1.0]}]})),
        ]);
        let b = backend(cfg(Some(dir.path())), t.clone());
        b.embed(&["a".into()]).unwrap();
        let both = b.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(both.row(1).to_vec(), vec![0.0, 1.0]);
        let reqs = t.requests.lock().unwrap();
        assert_eq!(reqs[1].1["input"], json!(["b"]));
    }
}
