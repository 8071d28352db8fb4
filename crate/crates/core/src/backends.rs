//! Probability sources and concurrent fan-out.
//!
//! A [`Backend`] turns a [`SampleRef`] into logits. Normalization into a
//! [`ModelOpinion`] happens here, in one place, so every source shares the
//! same softmax and entropy conventions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::ModelOpinion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payload {
    /// No content beyond the id (logit stores key on the id alone).
    None,
    Features(Vec<f64>),
    ImageFile(PathBuf),
    Bytes(#[serde(with = "b64")] Vec<u8>),
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub sample_id: String,
    pub payload: Payload,
}

impl SampleRef {
    pub fn new(sample_id: impl Into<String>, payload: Payload) -> Self {
        Self {
            sample_id: sample_id.into(),
            payload,
        }
    }

    pub fn id_only(sample_id: impl Into<String>) -> Self {
        Self::new(sample_id, Payload::None)
    }

    /// Raw payload bytes; features are encoded as little-endian f64.
    pub fn payload_bytes(&self) -> Result<Vec<u8>> {
        Ok(match &self.payload {
            Payload::None => Vec::new(),
            Payload::Features(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::ImageFile(path) => std::fs::read(path).map_err(|e| Error::io(path, e))?,
            Payload::Bytes(b) => b.clone(),
        })
    }

    /// SHA-256 over the sample id and its payload bytes.
    pub fn content_hash(&self) -> Result<[u8; 32]> {
        if self.sample_id.is_empty() {
            return Err(Error::Structural("sample id is empty".into()));
        }
        let mut h = Sha256::new();
        h.update((self.sample_id.len() as u64).to_le_bytes());
        h.update(self.sample_id.as_bytes());
        h.update(self.payload_bytes()?);
        Ok(h.finalize().into())
    }
}

/// Offline logits for one model, loaded from JSON Lines.
///
/// The first line is a header `{"model_id": .., "classes": C}`; every other
/// non-blank line is `{"id": .., "logits": [C floats]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitStore {
    pub model_id: String,
    pub num_classes: usize,
    logits: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

#[derive(Deserialize)]
struct StoreHeader {
    model_id: String,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    id: String,
    logits: Vec<f64>,
}

impl LogitStore {
    pub fn new(model_id: impl Into<String>, num_classes: usize) -> Self {
        Self {
            model_id: model_id.into(),
            num_classes,
            logits: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, logits: Vec<f64>) -> Result<()> {
        let id = id.into();
        if logits.len() != self.num_classes {
            return Err(Error::Structural(format!(
                "sample `{id}` has {} logits, expected {}",
                logits.len(),
                self.num_classes
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidInput(format!("sample `{id}` has a non-finite logit")));
        }
        if self.logits.insert(id.clone(), logits).is_some() {
            return Err(Error::Structural(format!("duplicate sample id `{id}`")));
        }
        self.order.push(id);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: StoreHeader = loop {
            let Some((i, line)) = lines.next() else {
                return Err(parse_err(1, "missing header record".into()));
            };
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            break serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
        };
        if header.classes < 2 {
            return Err(parse_err(1, format!("header declares {} classes", header.classes)));
        }
        let mut store = Self::new(header.model_id, header.classes);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            store
                .insert(rec.id, rec.logits)
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let header = serde_json::json!({"model_id": self.model_id, "classes": self.num_classes});
        let mut write = |s: String| writeln!(out, "{s}").map_err(|e| Error::io(path, e));
        write(header.to_string())?;
        for id in &self.order {
            let rec = StoreRecord {
                id: id.clone(),
                logits: self.logits[id].clone(),
            };
            write(serde_json::to_string(&rec)?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.logits.get(id).map(Vec::as_slice)
    }
}

/// A source of per-class logits.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    fn num_classes(&self) -> usize;
    /// Declared latency estimate in milliseconds.
    fn latency_estimate_ms(&self) -> f64 {
        0.0
    }
    fn logits(&self, sample: &SampleRef) -> Result<Vec<f64>>;
    fn health(&self) -> Result<()> {
        Ok(())
    }
}

/// Normalized opinion of `backend` on `sample`.
pub fn query(backend: &dyn Backend, sample: &SampleRef) -> Result<ModelOpinion> {
    let logits = backend.logits(sample)?;
    if logits.len() != backend.num_classes() {
        return Err(Error::Structural(format!(
            "backend `{}` returned {} logits, expected {}",
            backend.model_id(),
            logits.len(),
            backend.num_classes()
        )));
    }
    ModelOpinion::from_logits(backend.model_id(), &logits)
}

pub struct StoreBackend {
    store: Arc<LogitStore>,
    latency_ms: f64,
}

impl StoreBackend {
    pub fn new(store: impl Into<Arc<LogitStore>>) -> Self {
        Self {
            store: store.into(),
            latency_ms: 0.0,
        }
    }

    pub fn with_latency(mut self, ms: f64) -> Self {
        self.latency_ms = ms;
        self
    }
}

impl Backend for StoreBackend {
    fn model_id(&self) -> &str {
        &self.store.model_id
    }

    fn num_classes(&self) -> usize {
        self.store.num_classes
    }

    fn latency_estimate_ms(&self) -> f64 {
        self.latency_ms
    }

    fn logits(&self, sample: &SampleRef) -> Result<Vec<f64>> {
        self.store
            .get(&sample.sample_id)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingSample {
                model_id: self.store.model_id.clone(),
                sample_id: sample.sample_id.clone(),
            })
    }
}

/// Seeded pseudo-random logits, optionally biased toward known labels.
///
/// The logits for a sample depend only on `(seed, model_id, sample_id)`.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    model_id: String,
    num_classes: usize,
    seed: u64,
    noise: f64,
    signal: f64,
    labels: Arc<HashMap<String, usize>>,
    delay: Duration,
    fail: bool,
}

impl SyntheticBackend {
    pub fn new(model_id: impl Into<String>, num_classes: usize, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            num_classes,
            seed,
            noise: 1.0,
            signal: 0.0,
            labels: Arc::new(HashMap::new()),
            delay: Duration::ZERO,
            fail: false,
        }
    }

    /// Adds `signal` to the logit of each sample's true label.
    pub fn with_labels(mut self, labels: Arc<HashMap<String, usize>>, signal: f64) -> Self {
        self.labels = labels;
        self.signal = signal;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Every query fails with `BackendUnavailable`.
    pub fn failing(mut self) -> Self {
        self.fail = true;
        self
    }
}

impl Backend for SyntheticBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn latency_estimate_ms(&self) -> f64 {
        self.delay.as_secs_f64() * 1e3
    }

    fn logits(&self, sample: &SampleRef) -> Result<Vec<f64>> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        if self.fail {
            return Err(Error::BackendUnavailable {
                model_id: self.model_id.clone(),
                reason: "injected failure".into(),
            });
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.model_id.as_bytes());
        h.update([0]);
        h.update(sample.sample_id.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        let normal = Normal::new(0.0, self.noise.max(0.0))
            .map_err(|e| Error::Config(format!("noise scale: {e}")))?;
        let mut logits: Vec<f64> = (0..self.num_classes).map(|_| normal.sample(&mut rng)).collect();
        if let Some(&y) = self.labels.get(&sample.sample_id) {
            if y < self.num_classes {
                logits[y] += self.signal;
            }
        }
        Ok(logits)
    }
}

/// HTTP backend: `POST {base_url}/predict` with `{"id", "payload_b64"}`,
/// answered by `{"logits": [...]}`.
pub struct RemoteBackend {
    model_id: String,
    num_classes: usize,
    base_url: String,
    latency_ms: f64,
    retries: u32,
    client: reqwest::blocking::Client,
}

/// Environment variable consulted by [`RemoteBackend::url_from_env`].
pub fn remote_url_env_var(model_id: &str) -> String {
    let key: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("GAPCASCADE_REMOTE_URL_{key}")
}

#[derive(Deserialize)]
struct PredictResponse {
    logits: Vec<f64>,
}

impl RemoteBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(model_id: impl Into<String>, num_classes: usize, base_url: impl Into<String>) -> Result<Self> {
        Self::with_timeout(model_id, num_classes, base_url, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(
        model_id: impl Into<String>,
        num_classes: usize,
        base_url: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            model_id: model_id.into(),
            num_classes,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            latency_ms: 0.0,
            retries: 1,
            client,
        })
    }

    pub fn with_latency(mut self, ms: f64) -> Self {
        self.latency_ms = ms;
        self
    }

    /// `GAPCASCADE_REMOTE_URL_<MODEL_ID>` if set, else `fallback`.
    pub fn url_from_env(model_id: &str, fallback: Option<&str>) -> Option<String> {
        std::env::var(remote_url_env_var(model_id))
            .ok()
            .or_else(|| fallback.map(str::to_string))
    }

    fn unavailable(&self, reason: impl Into<String>) -> Error {
        Error::BackendUnavailable {
            model_id: self.model_id.clone(),
            reason: reason.into(),
        }
    }

    fn post_once(&self, body: &serde_json::Value, sample: &SampleRef) -> Result<Vec<f64>> {
        let resp = self
            .client
            .post(format!("{}/predict", self.base_url))
            .json(body)
            .send()
            .map_err(|e| self.unavailable(e.to_string()))?;
        match resp.status() {
            reqwest::StatusCode::NOT_FOUND => Err(Error::MissingSample {
                model_id: self.model_id.clone(),
                sample_id: sample.sample_id.clone(),
            }),
            s if !s.is_success() => Err(self.unavailable(format!("HTTP {s}"))),
            _ => {
                let parsed: PredictResponse = resp
                    .json()
                    .map_err(|e| self.unavailable(format!("bad response body: {e}")))?;
                Ok(parsed.logits)
            }
        }
    }
}

impl Backend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn latency_estimate_ms(&self) -> f64 {
        self.latency_ms
    }

    fn logits(&self, sample: &SampleRef) -> Result<Vec<f64>> {
        let body = serde_json::json!({
            "id": sample.sample_id,
            "payload_b64": base64::engine::general_purpose::STANDARD.encode(sample.payload_bytes()?),
        });
        let mut attempt = 0;
        loop {
            match self.post_once(&body, sample) {
                Err(e @ Error::BackendUnavailable { .. }) if attempt < self.retries => {
                    log::warn!("{e}; retrying");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn health(&self) -> Result<()> {
        let url = reqwest::Url::parse(&self.base_url).map_err(|e| self.unavailable(e.to_string()))?;
        let addrs = url
            .socket_addrs(|| None)
            .map_err(|e| self.unavailable(e.to_string()))?;
        let addr = addrs.first().ok_or_else(|| self.unavailable("no address"))?;
        std::net::TcpStream::connect_timeout(addr, Duration::from_secs(5))
            .map(|_| ())
            .map_err(|e| self.unavailable(e.to_string()))
    }
}

/// What to do when one backend fails on a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Strict,
    /// Drop failed members and fuse the survivors.
    Lenient,
}

/// Ordered set of backends sharing one label space.
#[derive(Clone)]
pub struct BackendSet {
    members: Vec<Arc<dyn Backend>>,
    num_classes: usize,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet")
            .field("models", &self.model_ids())
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

impl BackendSet {
    pub fn new(members: Vec<Arc<dyn Backend>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("backend set is empty".into()))?;
        let num_classes = first.num_classes();
        let mut seen = std::collections::HashSet::new();
        for b in &members {
            if !seen.insert(b.model_id().to_string()) {
                return Err(Error::Config(format!("duplicate model id `{}`", b.model_id())));
            }
            if b.num_classes() != num_classes {
                return Err(Error::Config(format!(
                    "backend `{}` declares {} classes, expected {num_classes}",
                    b.model_id(),
                    b.num_classes()
                )));
            }
        }
        Ok(Self { members, num_classes })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn members(&self) -> &[Arc<dyn Backend>] {
        &self.members
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.members.iter().map(|b| b.model_id()).collect()
    }

    pub fn latency_estimates_ms(&self) -> Vec<f64> {
        self.members.iter().map(|b| b.latency_estimate_ms()).collect()
    }

    pub fn health(&self) -> Result<()> {
        self.members.iter().try_for_each(|b| b.health())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FanOutResult {
    /// Opinions in declaration order (minus omitted members).
    pub opinions: Vec<ModelOpinion>,
    /// Members dropped under the lenient policy, with their errors.
    pub omitted: Vec<(String, String)>,
}

/// Queries every member concurrently and returns opinions in declaration order.
pub fn fan_out(backends: &BackendSet, sample: &SampleRef, policy: FailurePolicy) -> Result<FanOutResult> {
    let results: Vec<Result<ModelOpinion>> = if backends.len() == 1 {
        vec![query(backends.members[0].as_ref(), sample)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = backends
                .members
                .iter()
                .map(|b| scope.spawn(move || query(b.as_ref(), sample)))
                .collect();
            handles
                .into_iter()
                .zip(&backends.members)
                .map(|(h, b)| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::BackendUnavailable {
                            model_id: b.model_id().to_string(),
                            reason: "query panicked".into(),
                        })
                    })
                })
                .collect()
        })
    };

    let mut opinions = Vec::with_capacity(results.len());
    let mut omitted = Vec::new();
    for (r, b) in results.into_iter().zip(&backends.members) {
        match (r, policy) {
            (Ok(o), _) => opinions.push(o),
            (Err(e), FailurePolicy::Strict) => return Err(e),
            (Err(e), FailurePolicy::Lenient) => omitted.push((b.model_id().to_string(), e.to_string())),
        }
    }
    if opinions.is_empty() {
        return Err(Error::BackendUnavailable {
            model_id: backends.model_ids().join(","),
            reason: "every backend failed".into(),
        });
    }
    Ok(FanOutResult { opinions, omitted })
}
