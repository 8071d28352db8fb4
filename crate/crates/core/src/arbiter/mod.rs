//! Top-K constrained arbitration.
//!
//! A routed sample is re-examined by a language model that may only choose
//! among the ensemble's candidate set. Every failure mode (transport errors,
//! unparseable output, out-of-set answers) degrades to the ensemble's top
//! candidate, so the result label is always a member of the candidate set.

mod cache;
mod client;
mod descriptors;
mod mock;
mod prompt;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, ResponseCache};
pub use client::{GenerationParams, HttpLlmClient, LlmClient, MockLlmClient, TransportError, API_KEY_ENV};
pub use descriptors::{Descriptor, DescriptorDb};
pub use mock::{match_scores, mock_arbitrate, penalized_argmax, AttributeSet};
pub use prompt::{build_prompt, parse_response, PROMPT_VERSION};

use crate::backends::SampleRef;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationRequest {
    pub sample: SampleRef,
    /// Candidate classes, most probable first.
    pub candidates: Vec<usize>,
    /// Descriptors aligned with `candidates`.
    pub descriptors: Vec<Descriptor>,
    pub prompt_version: String,
}

impl ArbitrationRequest {
    pub fn new(sample: SampleRef, candidates: Vec<usize>, db: &DescriptorDb) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Structural("empty candidate set".into()));
        }
        let descriptors = candidates
            .iter()
            .map(|&c| db.get(c).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample,
            candidates,
            descriptors,
            prompt_version: PROMPT_VERSION.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationResult {
    /// Always a member of the request's candidates.
    pub label: usize,
    pub raw_response: String,
    /// The response parsed to an in-set choice.
    pub valid: bool,
    /// The label is the fallback `c1`.
    pub fell_back: bool,
    pub latency_ms: f64,
    #[serde(default)]
    pub from_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArbiterConfig {
    pub lambda_pen: f64,
    pub max_tokens: u32,
    pub gen_temperature: f64,
    pub timeout_s: f64,
    /// Extra attempts after a transport failure or unusable response.
    pub retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub model: String,
    pub base_url: String,
    pub max_concurrency: usize,
}

impl Default for ArbiterConfig {
    fn default() -> Self {
        Self {
            lambda_pen: 0.5,
            max_tokens: 512,
            gen_temperature: 0.7,
            timeout_s: 30.0,
            retries: 1,
            cache_dir: None,
            model: "qwen-vl-plus".into(),
            base_url: "https://dashscope.aliyuncs.com/compatible-mode/v1".into(),
            max_concurrency: 8,
        }
    }
}

impl ArbiterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pen >= 0.0) {
            return Err(Error::Config(format!("lambda_pen = {} is negative", self.lambda_pen)));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_tokens: self.max_tokens,
            temperature: self.gen_temperature,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }
}

/// Cached, retrying arbitration over an [`LlmClient`].
pub struct Arbiter {
    config: ArbiterConfig,
    client: Arc<dyn LlmClient>,
    cache: Option<ResponseCache>,
}

impl Arbiter {
    pub fn new(config: ArbiterConfig, client: Arc<dyn LlmClient>) -> Result<Self> {
        config.validate()?;
        let cache = config.cache_dir.clone().map(ResponseCache::new);
        Ok(Self { config, client, cache })
    }

    pub fn config(&self) -> &ArbiterConfig {
        &self.config
    }

    pub fn arbitrate(&self, request: &ArbitrationRequest) -> ArbitrationResult {
        let start = Instant::now();
        let mut warning = None;
        let key = match (&self.cache, cache_key(request)) {
            (Some(_), Ok(k)) => Some(k),
            (Some(_), Err(e)) => {
                warning = Some(format!("cache disabled for request: {e}"));
                None
            }
            (None, _) => None,
        };

        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            match cache.get(key) {
                Ok(Some(mut hit)) if request.candidates.contains(&hit.label) => {
                    hit.from_cache = true;
                    hit.latency_ms = start.elapsed().as_secs_f64() * 1e3;
                    hit.cache_warning = None;
                    return hit;
                }
                Ok(_) => {}
                Err(e) => warning = Some(format!("cache read failed: {e}")),
            }
        }

        let prompt = build_prompt(request);
        let params = self.config.generation();
        let mut raw_response = String::new();
        let mut chosen = None;
        for attempt in 0..=self.config.retries {
            match self.client.complete(request, &prompt, &params) {
                Ok(text) => {
                    chosen = parse_response(&text, request);
                    raw_response = text;
                    if chosen.is_some() {
                        break;
                    }
                    log::debug!("attempt {attempt}: unusable arbiter response");
                }
                Err(e) => {
                    log::warn!("attempt {attempt}: {e}");
                    raw_response = e.to_string();
                }
            }
        }

        let result = ArbitrationResult {
            label: chosen.unwrap_or(request.candidates[0]),
            raw_response,
            valid: chosen.is_some(),
            fell_back: chosen.is_none(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            from_cache: false,
            cache_warning: None,
        };

        if let (Some(cache), Some(key), true) = (&self.cache, &key, result.valid) {
            if let Err(e) = cache.put(key, &result) {
                warning = Some(format!("cache write failed: {e}"));
            }
        }
        if let Some(w) = &warning {
            log::warn!("{w}");
        }
        ArbitrationResult {
            cache_warning: warning,
            ..result
        }
    }
}
