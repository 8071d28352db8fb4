use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gapcascade_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::{ClassifyRequest, ClassifyResponse, Pipeline};

const LATENCY_WINDOW: usize = 10_000;

#[derive(Debug, Default)]
pub struct Counters {
    requests: AtomicU64,
    responses: AtomicU64,
    routed: AtomicU64,
    arbitrated: AtomicU64,
    cache_hits: AtomicU64,
    fallbacks: AtomicU64,
    errors: AtomicU64,
    latencies_ms: Mutex<VecDeque<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub responses: u64,
    pub errors: u64,
    pub routed: u64,
    /// `routed / responses`.
    pub trigger_rate: f64,
    pub arbitrated: u64,
    pub cache_hits: u64,
    /// `cache_hits / arbitrated`.
    pub cache_hit_rate: f64,
    pub fallbacks: u64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Counters {
    fn record(&self, r: &ClassifyResponse) {
        self.responses.fetch_add(1, Ordering::Relaxed);
        self.routed.fetch_add(u64::from(r.routed), Ordering::Relaxed);
        self.arbitrated.fetch_add(u64::from(r.arbitrated), Ordering::Relaxed);
        self.cache_hits.fetch_add(u64::from(r.from_cache), Ordering::Relaxed);
        self.fallbacks.fetch_add(u64::from(r.fell_back), Ordering::Relaxed);
        let mut lat = self.latencies_ms.lock().unwrap_or_else(|e| e.into_inner());
        if lat.len() == LATENCY_WINDOW {
            lat.pop_front();
        }
        lat.push_back(r.latencies_ms.total_ms);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let mut lat: Vec<f64> = self
            .latencies_ms
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .copied()
            .collect();
        lat.sort_by(f64::total_cmp);
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        let (responses, routed, arbitrated, hits) =
            (get(&self.responses), get(&self.routed), get(&self.arbitrated), get(&self.cache_hits));
        MetricsSnapshot {
            requests: get(&self.requests),
            responses,
            errors: get(&self.errors),
            routed,
            trigger_rate: ratio(routed, responses),
            arbitrated,
            cache_hits: hits,
            cache_hit_rate: ratio(hits, arbitrated),
            fallbacks: get(&self.fallbacks),
            latency_p50_ms: percentile(&lat, 0.50),
            latency_p95_ms: percentile(&lat, 0.95),
        }
    }
}

pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub counters: Counters,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>) -> Arc<Self> {
        Arc::new(Self {
            pipeline,
            counters: Counters::default(),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/classify", post(classify))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .with_state(state)
}

fn error_response(status: StatusCode, err: impl ToString) -> Response {
    (status, Json(json!({ "error": err.to_string() }))).into_response()
}

fn status_for(err: &Error) -> StatusCode {
    if err.is_backend_failure() {
        return StatusCode::BAD_GATEWAY;
    }
    match err {
        Error::InvalidInput(_)
        | Error::Structural(_)
        | Error::Index { .. }
        | Error::Usage(_)
        | Error::Json(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let request: ClassifyRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            state.counters.errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}"));
        }
    };
    let pipeline = state.pipeline.clone();
    let result = tokio::task::spawn_blocking(move || pipeline.classify(&request)).await;
    match result {
        Ok(Ok(resp)) => {
            state.counters.record(&resp);
            Json(resp).into_response()
        }
        Ok(Err(e)) => {
            state.counters.errors.fetch_add(1, Ordering::Relaxed);
            error_response(status_for(&e), e)
        }
        Err(e) => {
            state.counters.errors.fetch_add(1, Ordering::Relaxed);
            error_response(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let pipeline = state.pipeline.clone();
    let checks = tokio::task::spawn_blocking(move || {
        pipeline
            .cascade
            .backends
            .members()
            .iter()
            .map(|b| match b.health() {
                Ok(()) => json!({"model_id": b.model_id(), "ok": true}),
                Err(e) => json!({"model_id": b.model_id(), "ok": false, "error": e.to_string()}),
            })
            .collect::<Vec<_>>()
    })
    .await
    .unwrap_or_default();
    let healthy = !checks.is_empty() && checks.iter().all(|c| c["ok"] == true);
    let body = json!({
        "status": if healthy { "ok" } else { "degraded" },
        "mode": state.pipeline.mode,
        "backends": checks,
        "arbiter": state.pipeline.cascade.arbiter.is_some(),
    });
    let status = if healthy {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(body)).into_response()
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<MetricsSnapshot> {
    Json(state.counters.snapshot())
}

/// Binds `listen`, prints the bound address on stdout, and serves until the process exits.
pub async fn serve(pipeline: Arc<Pipeline>, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    println!("listening on {}", listener.local_addr()?);
    use std::io::Write as _;
    std::io::stdout().flush()?;
    axum::serve(listener, router(AppState::new(pipeline))).await
}
