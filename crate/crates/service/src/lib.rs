//! Streaming prediction service.
//!
//! Frames flow source → [`adaptor::Adaptor`] (uuid stamping, lane counts) →
//! [`broker`] (per-vehicle sessions) → [`worker::WorkerPool`] (stateless predict+explain) →
//! subscribers over the websocket protocol in [`protocol`].

pub mod adaptor;
pub mod broker;
pub mod identity;
pub mod outbox;
pub mod protocol;
pub mod server;
pub mod worker;

pub use adaptor::{Adaptor, AdaptorConfig, EnrichedFrame};
pub use broker::{spawn_broker, BrokerConfig, BrokerHandle, Client};
pub use identity::IdentityCache;
pub use protocol::{ClientMsg, ServerMsg};
pub use server::{start_service, ServiceConfig, Source};
pub use worker::{LocalWorker, Routing, WorkerPool};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Twin(#[from] xlane_twin::TwinError),
    #[error(transparent)]
    Core(#[from] xlane_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
