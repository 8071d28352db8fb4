use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::mock::{mock_arbitrate, AttributeSet};
use super::ArbitrationRequest;
use crate::backends::Payload;
use crate::error::{Error, Result};

/// Environment variable holding the LLM API key.
pub const API_KEY_ENV: &str = "GAPCASCADE_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

/// Text-completion endpoint used for arbitration.
pub trait LlmClient: Send + Sync {
    fn complete(
        &self,
        request: &ArbitrationRequest,
        prompt: &str,
        params: &GenerationParams,
    ) -> std::result::Result<String, TransportError>;
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completions client (`POST {base_url}/chat/completions`).
#[derive(Debug)]
pub struct HttpLlmClient {
    base_url: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
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

impl HttpLlmClient {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
        max_concurrency: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: api_key.into(),
            client,
            in_flight: Semaphore::new(max_concurrency),
        })
    }

    /// Reads the API key from [`API_KEY_ENV`].
    pub fn from_env(base_url: &str, model: &str, timeout: Duration, max_concurrency: usize) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::new(base_url, model, key, timeout, max_concurrency)
    }

    /// Request body for `prompt`.
    pub fn request_body(&self, request: &ArbitrationRequest, prompt: &str, params: &GenerationParams) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": prompt})];
        let image = match &request.sample.payload {
            Payload::ImageFile(path) => std::fs::read(path).ok(),
            Payload::Bytes(b) => Some(b.clone()),
            _ => None,
        };
        if let Some(bytes) = image {
            let url = format!(
                "data:image/jpeg;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(bytes)
            );
            content.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
        }
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(
        &self,
        request: &ArbitrationRequest,
        prompt: &str,
        params: &GenerationParams,
    ) -> std::result::Result<String, TransportError> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&self.request_body(request, prompt, params))
            .send()
            .map_err(|e| TransportError(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(TransportError(format!("HTTP {}", resp.status())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| TransportError(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError("response has no choices".into()))
    }
}

/// Answers with the token-overlap arbiter, using per-sample attribute fixtures.
#[derive(Debug, Clone, Default)]
pub struct MockLlmClient {
    attributes: Arc<HashMap<String, AttributeSet>>,
    lambda_pen: f64,
}

impl MockLlmClient {
    pub fn new(attributes: HashMap<String, AttributeSet>, lambda_pen: f64) -> Self {
        Self {
            attributes: Arc::new(attributes),
            lambda_pen,
        }
    }

    /// Loads a JSON map `sample_id → [attribute tokens]`.
    pub fn load_attributes(path: impl AsRef<std::path::Path>) -> Result<HashMap<String, AttributeSet>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

impl LlmClient for MockLlmClient {
    fn complete(
        &self,
        request: &ArbitrationRequest,
        _prompt: &str,
        _params: &GenerationParams,
    ) -> std::result::Result<String, TransportError> {
        let empty = AttributeSet::default();
        let attrs = self.attributes.get(&request.sample.sample_id).unwrap_or(&empty);
        let label = mock_arbitrate(attrs, request, self.lambda_pen);
        let pos = request
            .candidates
            .iter()
            .position(|&c| c == label)
            .expect("mock picks among candidates");
        Ok(serde_json::json!({
            "choice": request.descriptors[pos].class_name,
            "reason": format!("{} matching attributes", attrs.len()),
        })
        .to_string())
    }
}
