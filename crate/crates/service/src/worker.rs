//! Stateless prediction workers and the broker-side pool that routes requests to them.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use futures::future::BoxFuture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlane_core::explanation::{explain_super_features, TopEntry};
use xlane_core::ig::{integrated_gradients, IgConfig};
use xlane_core::lrp::{explain, LnRule, LrpConfig};
use xlane_core::lstm::forward;
use xlane_core::window::FRAMES;
use xlane_core::{Params, Window};

use crate::protocol::{MethodKind, PredictRequest, PredictResponse, SuperFeatureArrays};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkerError {
    /// The request itself is invalid; retrying elsewhere cannot help.
    #[error("rejected ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("worker unavailable: {0}")]
    Unavailable(String),
    #[error("worker timed out")]
    Timeout,
}

/// Predict and explain one request. Pure function of the model and the payload.
pub fn predict(p: &Params, req: &PredictRequest) -> Result<PredictResponse, WorkerError> {
    let bad = |e: xlane_core::CoreError| WorkerError::Rejected {
        status: 422,
        message: e.to_string(),
    };
    let w: Window = req.window.to_window().map_err(bad)?;
    let (pred, trace) = forward(&w, p).map_err(bad)?;
    let class = req.class.unwrap_or(pred.predicted_class);
    let cfg = req.config;
    let (relevance, method) = match cfg.method {
        MethodKind::Lrp => {
            let lrp = LrpConfig {
                epsilon: cfg.epsilon,
                ln_rule: cfg.ln_rule,
                omega_variant: cfg.omega_variant,
            };
            let name = match cfg.ln_rule {
                LnRule::Omega => "lrp-omega",
                LnRule::Identity => "lrp-identity",
            };
            (explain(&w, p, &trace, class, &lrp).map_err(bad)?.relevance, name)
        }
        MethodKind::Ig => (
            integrated_gradients(&w, p, class, &IgConfig::with_steps(cfg.ig_steps)).map_err(bad)?,
            "ig",
        ),
    };
    let sf = explain_super_features(&relevance);
    Ok(PredictResponse {
        probabilities: pred.probabilities,
        predicted_class: pred.predicted_class,
        explained_class: class,
        method: method.to_string(),
        relevance: (0..FRAMES).map(|k| relevance.frame(k).to_vec()).collect(),
        super_features: SuperFeatureArrays {
            movement: sf.movement.to_vec(),
            position: sf.position.to_vec(),
        },
        top3: sf.ranked_top3.iter().map(TopEntry::from).collect(),
    })
}

/// Decode, predict and encode. The response body is deterministic for identical input bytes.
pub fn predict_bytes(p: &Params, body: &[u8]) -> Result<Vec<u8>, WorkerError> {
    let req: PredictRequest = serde_json::from_slice(body).map_err(|e| WorkerError::Rejected {
        status: 422,
        message: e.to_string(),
    })?;
    let resp = predict(p, &req)?;
    Ok(serde_json::to_vec(&resp).expect("response serializes"))
}

pub trait Worker: Send + Sync {
    fn name(&self) -> String;
    fn predict(&self, body: Arc<Vec<u8>>) -> BoxFuture<'static, Result<Vec<u8>, WorkerError>>;
}

/// In-process worker running on the blocking thread pool.
pub struct LocalWorker {
    name: String,
    params: Arc<Params>,
}

impl LocalWorker {
    pub fn new(name: impl Into<String>, params: Arc<Params>) -> Self {
        Self {
            name: name.into(),
            params,
        }
    }
}

impl Worker for LocalWorker {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, body: Arc<Vec<u8>>) -> BoxFuture<'static, Result<Vec<u8>, WorkerError>> {
        let p = self.params.clone();
        Box::pin(async move {
            tokio::task::spawn_blocking(move || predict_bytes(&p, &body))
                .await
                .map_err(|e| WorkerError::Unavailable(e.to_string()))?
        })
    }
}

/// Remote worker reached over HTTP (`POST {base}/predict`).
pub struct HttpWorker {
    base: String,
    client: reqwest::Client,
}

impl HttpWorker {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            client: reqwest::Client::new(),
        }
    }
}

impl Worker for HttpWorker {
    fn name(&self) -> String {
        self.base.clone()
    }

    fn predict(&self, body: Arc<Vec<u8>>) -> BoxFuture<'static, Result<Vec<u8>, WorkerError>> {
        let req = self
            .client
            .post(format!("{}/predict", self.base))
            .header("content-type", "application/json")
            .body((*body).clone());
        Box::pin(async move {
            let resp = req.send().await.map_err(|e| WorkerError::Unavailable(e.to_string()))?;
            let status = resp.status();
            let bytes = resp.bytes().await.map_err(|e| WorkerError::Unavailable(e.to_string()))?;
            if status.is_success() {
                Ok(bytes.to_vec())
            } else if status.is_client_error() {
                Err(WorkerError::Rejected {
                    status: status.as_u16(),
                    message: String::from_utf8_lossy(&bytes).into_owned(),
                })
            } else {
                Err(WorkerError::Unavailable(format!("status {status}")))
            }
        })
    }
}

/// `POST /predict`, `GET /healthz`.
pub fn worker_router(params: Arc<Params>) -> Router {
    Router::new()
        .route("/predict", post(predict_handler))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(params)
}

async fn predict_handler(State(p): State<Arc<Params>>, body: Bytes) -> (StatusCode, Vec<u8>) {
    match tokio::task::spawn_blocking(move || predict_bytes(&p, &body)).await {
        Ok(Ok(out)) => (StatusCode::OK, out),
        Ok(Err(WorkerError::Rejected { status, message })) => (
            StatusCode::from_u16(status).unwrap_or(StatusCode::UNPROCESSABLE_ENTITY),
            message.into_bytes(),
        ),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string().into_bytes()),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string().into_bytes()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    RoundRobin,
    /// Uniformly random worker per request from a seeded stream.
    Shuffled(u64),
}

enum Picker {
    RoundRobin(AtomicUsize),
    Shuffled(Mutex<ChaCha8Rng>),
}

pub struct WorkerPool {
    workers: Vec<Arc<dyn Worker>>,
    router: Picker,
    timeout: Duration,
}

impl WorkerPool {
    pub fn new(workers: Vec<Arc<dyn Worker>>, routing: Routing, timeout: Duration) -> Self {
        assert!(!workers.is_empty(), "worker pool needs at least one worker");
        let router = match routing {
            Routing::RoundRobin => Picker::RoundRobin(AtomicUsize::new(0)),
            Routing::Shuffled(seed) => Picker::Shuffled(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        };
        Self {
            workers,
            router,
            timeout,
        }
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    fn choose(&self) -> usize {
        let n = self.workers.len();
        match &self.router {
            Picker::RoundRobin(next) => next.fetch_add(1, Ordering::Relaxed) % n,
            Picker::Shuffled(rng) => rng.lock().expect("routing rng").gen_range(0..n),
        }
    }

    async fn try_worker(&self, i: usize, body: &Arc<Vec<u8>>) -> Result<Vec<u8>, WorkerError> {
        match tokio::time::timeout(self.timeout, self.workers[i].predict(body.clone())).await {
            Ok(r) => r,
            Err(_) => Err(WorkerError::Timeout),
        }
    }

    /// Send to one worker; on timeout or unavailability retry once on the next worker.
    pub async fn dispatch(&self, body: Vec<u8>) -> Result<Vec<u8>, WorkerError> {
        let body = Arc::new(body);
        let first = self.choose();
        match self.try_worker(first, &body).await {
            Err(e @ (WorkerError::Timeout | WorkerError::Unavailable(_))) => {
                log::warn!("worker {} failed ({e}), retrying", self.workers[first].name());
                self.try_worker((first + 1) % self.workers.len(), &body).await
            }
            r => r,
        }
    }
}
