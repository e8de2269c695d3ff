//! JSON-over-HTTP transport for a cooperating inference host.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{AttentionPayload, Backend, BackendRequest, Capabilities, InferResponse, Role, Transport};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::sync::Semaphore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    /// Requests in flight across all sessions of one backend.
    pub max_in_flight: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 250,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    role: Role,
    prompt: &'a str,
    images: Vec<String>,
    text_context: Option<&'a str>,
    want_attention: bool,
    layer_range: Option<[usize; 2]>,
}

#[derive(Deserialize)]
struct WireAttention {
    dims: [usize; 5],
    data: String,
    #[serde(default)]
    tokens: Vec<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    attention: Option<WireAttention>,
}

fn decode_attention(wire: WireAttention) -> Result<AttentionPayload> {
    let bytes = B64
        .decode(wire.data.as_bytes())
        .map_err(|e| Error::Protocol(format!("attention data is not base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Protocol(format!(
            "attention data has {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(AttentionPayload {
        dims: wire.dims,
        data,
        tokens: wire.tokens,
    })
}

/// Encodes attention values the way the host sends them. Used by test servers.
pub fn encode_attention_data(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

#[derive(Debug)]
struct Shared {
    base: String,
    client: Client,
    settings: HttpSettings,
    permits: Semaphore,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    shared: Arc<Shared>,
}

impl HttpBackend {
    pub fn new(base_url: &str, settings: HttpSettings) -> Result<Self> {
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(Error::Config(format!(
                "backend endpoint {base_url:?} is neither mock: nor http(s)://"
            )));
        }
        if settings.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            shared: Arc::new(Shared {
                base: base_url.trim_end_matches('/').to_string(),
                client,
                permits: Semaphore::new(settings.max_in_flight),
                settings,
            }),
        })
    }
}

enum Attempt {
    Done(Vec<u8>),
    Retry(String),
    Fatal(Error),
}

impl Shared {
    fn attempt(&self, build: &dyn Fn() -> reqwest::blocking::RequestBuilder) -> Attempt {
        let _permit = self.permits.acquire();
        match build().send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    match resp.bytes() {
                        Ok(b) => Attempt::Done(b.to_vec()),
                        Err(e) => Attempt::Retry(format!("reading body: {e}")),
                    }
                } else if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
                    Attempt::Retry(format!("HTTP {status}"))
                } else {
                    let body = resp.text().unwrap_or_default();
                    Attempt::Fatal(Error::Protocol(format!("HTTP {status}: {}", body.trim())))
                }
            }
            Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => Attempt::Retry(e.to_string()),
            Err(e) => Attempt::Fatal(Error::Protocol(e.to_string())),
        }
    }

    /// Sends with exponential backoff. Every request is idempotent, so a retry
    /// after an ambiguous failure is safe.
    fn send(&self, build: &dyn Fn() -> reqwest::blocking::RequestBuilder) -> Result<Vec<u8>> {
        let mut delay = Duration::from_millis(self.settings.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 1..=self.settings.max_attempts {
            match self.attempt(build) {
                Attempt::Done(body) => return Ok(body),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::debug!("attempt {attempt} to {} failed: {msg}", self.base);
                    last = msg;
                    if attempt < self.settings.max_attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::BackendUnavailable {
            attempts: self.settings.max_attempts,
            message: last,
        })
    }
}

struct HttpSession {
    shared: Arc<Shared>,
}

impl Transport for HttpSession {
    fn infer(&mut self, request: &BackendRequest) -> Result<InferResponse> {
        let images = request
            .images
            .iter()
            .map(|img| img.to_png_bytes().map(|b| B64.encode(b)))
            .collect::<Result<Vec<_>>>()?;
        let body = serde_json::to_vec(&WireRequest {
            role: request.role,
            prompt: &request.prompt,
            images,
            text_context: request.text_context.as_deref(),
            want_attention: request.want_attention,
            layer_range: request.layer_range,
        })?;
        let url = format!("{}/v1/infer", self.shared.base);
        let client = &self.shared.client;
        let bytes = self.shared.send(&|| {
            client
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone())
        })?;
        let wire: WireResponse =
            serde_json::from_slice(&bytes).map_err(|e| Error::Protocol(format!("malformed infer response: {e}")))?;
        let attention = wire.attention.map(decode_attention).transpose()?;
        Ok(InferResponse {
            text: wire.text,
            attention,
            fabricated: None,
        })
    }

    fn capabilities(&mut self) -> Result<Capabilities> {
        let url = format!("{}/v1/capabilities", self.shared.base);
        let client = &self.shared.client;
        let bytes = self.shared.send(&|| client.get(&url))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Protocol(format!("malformed capabilities: {e}")))
    }
}

impl Backend for HttpBackend {
    fn open(&self, _instance: &Instance) -> Result<Box<dyn Transport>> {
        Ok(Box::new(HttpSession {
            shared: self.shared.clone(),
        }))
    }

    fn describe(&self) -> String {
        self.shared.base.clone()
    }
}
