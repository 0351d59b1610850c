//! Session broker: owns all session state, turns enriched frames into worker requests and
//! fans results out to subscribers.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use uuid::Uuid;
use xlane_core::window::{WindowFile, FRAMES};
use xlane_core::Slot;
use xlane_twin::{build_window, Frame};

use crate::adaptor::EnrichedFrame;
use crate::outbox::{Outbox, DEFAULT_CAPACITY};
use crate::protocol::{
    CloseReason, ErrorReason, MethodConfig, PredictRequest, PredictResponse, PredictionMsg, RosterEntry, ServerMsg,
};
use crate::worker::WorkerPool;

pub type ClientId = u64;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Vehicle absence (stream seconds) after which its sessions close.
    pub ttl: f64,
    /// Wall time a session survives without subscribers after a disconnect.
    pub grace: Duration,
    pub queue_capacity: usize,
    /// Send the roster every this many frames.
    pub roster_every: usize,
    pub method: MethodConfig,
    pub tick: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            ttl: crate::identity::DEFAULT_TTL_S,
            grace: Duration::from_secs(2),
            queue_capacity: DEFAULT_CAPACITY,
            roster_every: 2,
            method: MethodConfig::default(),
            tick: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BrokerStats {
    pub sessions: usize,
    pub clients: usize,
    pub live_vehicles: usize,
    pub frames: u64,
    pub predictions: u64,
    pub worker_errors: u64,
}

enum Event {
    Frame {
        frame: Arc<EnrichedFrame>,
        ingest: Instant,
        ingest_unix_ms: f64,
    },
    EndOfStream,
    Connect {
        client: ClientId,
        outbox: Arc<Outbox>,
    },
    Disconnect {
        client: ClientId,
    },
    Open {
        client: ClientId,
        uuid: Uuid,
    },
    Close {
        client: ClientId,
        uuid: Uuid,
    },
    Result {
        uuid: Uuid,
        ingest: Instant,
        msg: ServerMsg,
    },
    Stats(oneshot::Sender<BrokerStats>),
    Shutdown,
}

struct Job {
    body: Vec<u8>,
    uuid: Uuid,
    t: f64,
    ingest: Instant,
    ingest_unix_ms: f64,
    neighbours: BTreeMap<String, Uuid>,
}

struct Session {
    history: VecDeque<Arc<Frame>>,
    subscribers: BTreeSet<ClientId>,
    orphaned_since: Option<Instant>,
    jobs: mpsc::UnboundedSender<Job>,
}

struct Broker {
    cfg: BrokerConfig,
    pool: Arc<WorkerPool>,
    events: mpsc::UnboundedSender<Event>,
    sessions: HashMap<Uuid, Session>,
    clients: HashMap<ClientId, Arc<Outbox>>,
    /// Last stream time each live vehicle was seen.
    live: HashMap<Uuid, f64>,
    stats: BrokerStats,
}

fn unix_ms() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64() * 1e3)
        .unwrap_or(0.0)
}

async fn session_task(pool: Arc<WorkerPool>, mut jobs: mpsc::UnboundedReceiver<Job>, events: mpsc::UnboundedSender<Event>) {
    while let Some(job) = jobs.recv().await {
        let msg = match pool.dispatch(job.body).await {
            Ok(bytes) => match serde_json::from_slice::<PredictResponse>(&bytes) {
                Ok(r) => ServerMsg::Prediction(PredictionMsg {
                    uuid: job.uuid,
                    t: job.t,
                    probabilities: r.probabilities,
                    predicted_class: r.predicted_class,
                    top3: r.top3,
                    latency_ms: 0.0,
                    ingest_unix_ms: job.ingest_unix_ms,
                    neighbours: job.neighbours,
                }),
                Err(e) => worker_error(job.uuid, format!("undecodable worker response: {e}")),
            },
            Err(e) => worker_error(job.uuid, e.to_string()),
        };
        let ev = Event::Result {
            uuid: job.uuid,
            ingest: job.ingest,
            msg,
        };
        if events.send(ev).is_err() {
            break;
        }
    }
}

fn worker_error(uuid: Uuid, message: String) -> ServerMsg {
    ServerMsg::Error {
        uuid: Some(uuid),
        reason: ErrorReason::Worker,
        message,
    }
}

impl Broker {
    fn push_to(&self, client: ClientId, msg: ServerMsg) {
        if let Some(o) = self.clients.get(&client) {
            o.push(msg);
        }
    }

    fn fan_out(&self, subscribers: &BTreeSet<ClientId>, msg: &ServerMsg) {
        for c in subscribers {
            self.push_to(*c, msg.clone());
        }
    }

    fn close_session(&mut self, uuid: Uuid, reason: CloseReason) {
        if let Some(s) = self.sessions.remove(&uuid) {
            self.fan_out(&s.subscribers, &ServerMsg::SessionClosed { uuid, reason });
            log::debug!("session {uuid} closed: {reason:?}");
        }
    }

    fn on_frame(&mut self, frame: Arc<EnrichedFrame>, ingest: Instant, ingest_unix_ms: f64) {
        let t = frame.timestamp;
        self.stats.frames += 1;
        for v in &frame.vehicles {
            self.live.insert(v.uuid, t);
        }
        let ttl = self.cfg.ttl;
        self.live.retain(|_, seen| t - *seen <= ttl);
        let gone: Vec<Uuid> = self.sessions.keys().filter(|u| !self.live.contains_key(u)).copied().collect();
        for u in gone {
            self.close_session(u, CloseReason::VehicleLeft);
        }

        let raw_frame = Arc::new(frame.to_frame());
        let mut outgoing = Vec::new();
        for (&uuid, s) in self.sessions.iter_mut() {
            let Some(raw) = frame.raw_of(uuid) else { continue };
            if s.history.len() == FRAMES {
                s.history.pop_front();
            }
            s.history.push_back(raw_frame.clone());
            let built = if s.history.len() < FRAMES {
                None
            } else {
                build_window(s.history.iter().map(|f| f.as_ref()), raw, t).ok()
            };
            let Some(built) = built else {
                let frames = s.history.len();
                outgoing.push((uuid, ServerMsg::Warming { uuid, t, frames }));
                continue;
            };
            let neighbours = Slot::ALL
                .iter()
                .filter_map(|&slot| {
                    let r = built.slots[FRAMES - 1][slot.index()]?;
                    Some((slot.name().to_string(), frame.uuid_of(r)?))
                })
                .collect();
            let req = PredictRequest {
                window: WindowFile::from_window(&built.window, None),
                config: self.cfg.method,
                class: None,
            };
            let job = Job {
                body: serde_json::to_vec(&req).expect("request serializes"),
                uuid,
                t,
                ingest,
                ingest_unix_ms,
                neighbours,
            };
            // the receiver lives as long as the session
            let _ = s.jobs.send(job);
        }
        for (uuid, msg) in outgoing {
            self.fan_out(&self.sessions[&uuid].subscribers, &msg);
        }

        if self.cfg.roster_every > 0 && (self.stats.frames - 1) % self.cfg.roster_every as u64 == 0 {
            let mut vehicles: Vec<RosterEntry> = frame
                .vehicles
                .iter()
                .map(|v| RosterEntry {
                    uuid: v.uuid,
                    lane: v.lane,
                    x: v.features.x,
                })
                .collect();
            vehicles.sort_by(|a, b| a.x.total_cmp(&b.x));
            let msg = ServerMsg::Roster { t, vehicles };
            for o in self.clients.values() {
                o.push(msg.clone());
            }
        }
    }

    fn on_open(&mut self, client: ClientId, uuid: Uuid) {
        if !self.clients.contains_key(&client) {
            return;
        }
        if !self.live.contains_key(&uuid) {
            self.push_to(
                client,
                ServerMsg::Error {
                    uuid: Some(uuid),
                    reason: ErrorReason::NotFound,
                    message: format!("vehicle {uuid} is not in the stream"),
                },
            );
            return;
        }
        let pool = &self.pool;
        let events = &self.events;
        let s = self.sessions.entry(uuid).or_insert_with(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            tokio::spawn(session_task(pool.clone(), rx, events.clone()));
            Session {
                history: VecDeque::with_capacity(FRAMES),
                subscribers: BTreeSet::new(),
                orphaned_since: None,
                jobs: tx,
            }
        });
        s.subscribers.insert(client);
        s.orphaned_since = None;
        self.push_to(client, ServerMsg::Opened { uuid });
    }

    fn on_close(&mut self, client: ClientId, uuid: Uuid) {
        let Some(s) = self.sessions.get_mut(&uuid).filter(|s| s.subscribers.contains(&client)) else {
            self.push_to(
                client,
                ServerMsg::Error {
                    uuid: Some(uuid),
                    reason: ErrorReason::NotFound,
                    message: format!("no open session for {uuid}"),
                },
            );
            return;
        };
        s.subscribers.remove(&client);
        let empty = s.subscribers.is_empty();
        self.push_to(
            client,
            ServerMsg::SessionClosed {
                uuid,
                reason: CloseReason::Closed,
            },
        );
        if empty {
            self.close_session(uuid, CloseReason::Closed);
        }
    }

    fn on_disconnect(&mut self, client: ClientId) {
        if let Some(o) = self.clients.remove(&client) {
            o.close();
        }
        let now = Instant::now();
        for s in self.sessions.values_mut() {
            if s.subscribers.remove(&client) && s.subscribers.is_empty() {
                s.orphaned_since = Some(now);
            }
        }
    }

    fn on_result(&mut self, uuid: Uuid, ingest: Instant, mut msg: ServerMsg) {
        let Some(s) = self.sessions.get(&uuid) else { return };
        match &mut msg {
            ServerMsg::Prediction(p) => {
                p.latency_ms = ingest.elapsed().as_secs_f64() * 1e3;
                self.stats.predictions += 1;
            }
            _ => self.stats.worker_errors += 1,
        }
        self.fan_out(&s.subscribers, &msg);
    }

    fn on_tick(&mut self) {
        let grace = self.cfg.grace;
        let expired: Vec<Uuid> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.orphaned_since.is_some_and(|t| t.elapsed() >= grace))
            .map(|(u, _)| *u)
            .collect();
        for u in expired {
            self.close_session(u, CloseReason::NoSubscribers);
        }
    }

    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Event>) {
        let mut tick = tokio::time::interval(self.cfg.tick);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            let ev = tokio::select! {
                ev = rx.recv() => match ev {
                    Some(ev) => ev,
                    None => break,
                },
                _ = tick.tick() => {
                    self.on_tick();
                    continue;
                }
            };
            match ev {
                Event::Frame {
                    frame,
                    ingest,
                    ingest_unix_ms,
                } => self.on_frame(frame, ingest, ingest_unix_ms),
                Event::EndOfStream => {
                    let all: Vec<Uuid> = self.sessions.keys().copied().collect();
                    for u in all {
                        self.close_session(u, CloseReason::StreamEnded);
                    }
                    self.live.clear();
                }
                Event::Connect { client, outbox } => {
                    self.clients.insert(client, outbox);
                }
                Event::Disconnect { client } => self.on_disconnect(client),
                Event::Open { client, uuid } => self.on_open(client, uuid),
                Event::Close { client, uuid } => self.on_close(client, uuid),
                Event::Result { uuid, ingest, msg } => self.on_result(uuid, ingest, msg),
                Event::Stats(reply) => {
                    let mut s = self.stats.clone();
                    s.sessions = self.sessions.len();
                    s.clients = self.clients.len();
                    s.live_vehicles = self.live.len();
                    let _ = reply.send(s);
                }
                Event::Shutdown => break,
            }
        }
        for o in self.clients.values() {
            o.close();
        }
    }
}

/// Cheap, cloneable entry point to a running broker.
#[derive(Clone)]
pub struct BrokerHandle {
    tx: mpsc::UnboundedSender<Event>,
    next_client: Arc<AtomicU64>,
    capacity: usize,
}

/// Start the broker task on the current tokio runtime.
pub fn spawn_broker(cfg: BrokerConfig, pool: Arc<WorkerPool>) -> (BrokerHandle, JoinHandle<()>) {
    let (tx, rx) = mpsc::unbounded_channel();
    let handle = BrokerHandle {
        tx: tx.clone(),
        next_client: Arc::new(AtomicU64::new(1)),
        capacity: cfg.queue_capacity,
    };
    let broker = Broker {
        cfg,
        pool,
        events: tx,
        sessions: HashMap::new(),
        clients: HashMap::new(),
        live: HashMap::new(),
        stats: BrokerStats::default(),
    };
    (handle, tokio::spawn(broker.run(rx)))
}

impl BrokerHandle {
    /// `false` once the broker has stopped.
    fn send(&self, ev: Event) -> bool {
        self.tx.send(ev).is_ok()
    }

    pub fn connect(&self) -> Client {
        let id = self.next_client.fetch_add(1, Ordering::Relaxed);
        let outbox = Arc::new(Outbox::new(self.capacity));
        let _ = self.send(Event::Connect {
            client: id,
            outbox: outbox.clone(),
        });
        Client {
            id,
            outbox,
            broker: self.clone(),
        }
    }

    /// Returns `false` once the broker has stopped.
    pub fn push_frame(&self, frame: EnrichedFrame) -> bool {
        self.send(Event::Frame {
            frame: Arc::new(frame),
            ingest: Instant::now(),
            ingest_unix_ms: unix_ms(),
        })
    }

    /// The source is exhausted: close every session.
    pub fn end_of_stream(&self) {
        let _ = self.send(Event::EndOfStream);
    }

    pub async fn stats(&self) -> Option<BrokerStats> {
        let (tx, rx) = oneshot::channel();
        let _ = self.send(Event::Stats(tx));
        rx.await.ok()
    }

    pub fn shutdown(&self) {
        let _ = self.send(Event::Shutdown);
    }
}

/// One connected subscriber. Dropping it disconnects.
pub struct Client {
    id: ClientId,
    outbox: Arc<Outbox>,
    broker: BrokerHandle,
}

impl Client {
    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn open(&self, uuid: Uuid) {
        let _ = self.broker.send(Event::Open { client: self.id, uuid });
    }

    pub fn close(&self, uuid: Uuid) {
        let _ = self.broker.send(Event::Close { client: self.id, uuid });
    }

    pub async fn recv(&self) -> Option<ServerMsg> {
        self.outbox.recv().await
    }

    pub fn try_recv(&self) -> Option<ServerMsg> {
        self.outbox.try_recv()
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.broker.send(Event::Disconnect { client: self.id });
    }
}
