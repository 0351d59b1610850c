//! Network front ends: the broker websocket endpoint and the full service runtime.

use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use xlane_core::Params;
use xlane_twin::{stream_replay, FrameSource, RecordSource, SimConfig, Simulator};

use crate::adaptor::{Adaptor, AdaptorConfig};
use crate::broker::{spawn_broker, BrokerConfig, BrokerHandle};
use crate::protocol::{ClientMsg, ErrorReason, ServerMsg};
use crate::worker::{worker_router, HttpWorker, Routing, Worker, WorkerPool};
use crate::{Result, ServiceError};

/// `GET /ws` (client protocol), `GET /healthz`.
pub fn broker_router(broker: BrokerHandle) -> Router {
    Router::new()
        .route("/ws", get(ws_handler))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(broker)
}

async fn ws_handler(State(broker): State<BrokerHandle>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client_loop(broker, socket))
}

async fn client_loop(broker: BrokerHandle, socket: WebSocket) {
    let client = broker.connect();
    let (mut sink, mut stream) = socket.split();
    loop {
        tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<ClientMsg>(&text) {
                    Ok(ClientMsg::Open { uuid }) => client.open(uuid),
                    Ok(ClientMsg::Close { uuid }) => client.close(uuid),
                    Err(e) => {
                        let msg = ServerMsg::Error { uuid: None, reason: ErrorReason::BadRequest, message: e.to_string() };
                        let text = serde_json::to_string(&msg).expect("message serializes");
                        if sink.send(Message::Text(text.into())).await.is_err() {
                            break;
                        }
                    }
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            out = client.recv() => match out {
                Some(msg) => {
                    let text = serde_json::to_string(&msg).expect("message serializes");
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
        }
    }
}

/// Serve `router` on `addr` in a background task; returns the bound address.
pub async fn serve_router(router: Router, addr: SocketAddr) -> Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            log::error!("server on {bound} stopped: {e}");
        }
    });
    Ok(bound)
}

#[derive(Debug, Clone)]
pub enum Source {
    Sim(SimConfig),
    Replay(PathBuf),
}

impl std::str::FromStr for Source {
    type Err = ServiceError;

    /// `sim` or `replay:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "sim" => Ok(Source::Sim(SimConfig::default())),
            Some(("replay", path)) if !path.is_empty() => Ok(Source::Replay(path.into())),
            _ => Err(ServiceError::Config(format!("source must be sim or replay:<file>, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub source: Source,
    pub workers: usize,
    pub port: u16,
    /// Stream time advanced per wall second.
    pub rate: f64,
    pub adaptor: AdaptorConfig,
    pub broker: BrokerConfig,
    pub worker_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            source: Source::Sim(SimConfig::default()),
            workers: 2,
            port: 8080,
            rate: 1.0,
            adaptor: AdaptorConfig::default(),
            broker: BrokerConfig::default(),
            worker_timeout: Duration::from_secs(2),
        }
    }
}

pub struct RunningService {
    pub broker: BrokerHandle,
    pub addr: SocketAddr,
    pub worker_addrs: Vec<SocketAddr>,
    /// Finishes with the number of frames read once the source is exhausted or the
    /// broker stops.
    pub source: tokio::task::JoinHandle<Result<usize>>,
}

impl RunningService {
    /// Stop the broker; the source feed ends at its next frame.
    pub fn stop(&self) {
        self.broker.shutdown();
    }
}

/// Start `workers` HTTP workers, the broker with its websocket endpoint, and the paced
/// source → adaptor feed.
pub async fn start_service(params: Arc<Params>, cfg: ServiceConfig) -> Result<RunningService> {
    if cfg.workers == 0 {
        return Err(ServiceError::Config("at least one worker is required".into()));
    }
    let mut worker_addrs = Vec::with_capacity(cfg.workers);
    let mut workers: Vec<Arc<dyn Worker>> = Vec::with_capacity(cfg.workers);
    for _ in 0..cfg.workers {
        let a = serve_router(worker_router(params.clone()), ([127, 0, 0, 1], 0).into()).await?;
        workers.push(Arc::new(HttpWorker::new(format!("http://{a}"))));
        worker_addrs.push(a);
    }
    let pool = Arc::new(WorkerPool::new(workers, Routing::RoundRobin, cfg.worker_timeout));
    let (broker, _) = spawn_broker(cfg.broker.clone(), pool);
    let addr = serve_router(broker_router(broker.clone()), ([0, 0, 0, 0], cfg.port).into()).await?;

    let mut adaptor_cfg = cfg.adaptor.clone();
    let mut src: Box<dyn FrameSource> = match &cfg.source {
        Source::Sim(sc) => {
            adaptor_cfg.lane_count = sc.lane_count;
            let mut sim = Simulator::new(sc.clone())?;
            sim.warm_up(30.0);
            Box::new(sim)
        }
        Source::Replay(p) => Box::new(RecordSource::open(p)?),
    };
    let mut adaptor = Adaptor::restore(adaptor_cfg)?;
    let feed = broker.clone();
    let rate = cfg.rate;
    let source = tokio::task::spawn_blocking(move || {
        let n = stream_replay(src.as_mut(), rate, |frame| {
            match adaptor.process_frame(frame) {
                Some(e) => {
                    if feed.push_frame(e) {
                        ControlFlow::Continue(())
                    } else {
                        ControlFlow::Break(())
                    }
                }
                None => ControlFlow::Continue(()),
            }
        });
        adaptor.snapshot();
        feed.end_of_stream();
        Ok(n?)
    });
    Ok(RunningService {
        broker,
        addr,
        worker_addrs,
        source,
    })
}
