//! Wire types: broker client protocol and worker request/response bodies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use uuid::Uuid;
use xlane_core::explanation::TopEntry;
use xlane_core::lrp::{LnRule, OmegaVariant, DEFAULT_EPSILON};
use xlane_core::window::WindowFile;
use xlane_core::Class;

/// Client → broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Open { uuid: Uuid },
    Close { uuid: Uuid },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub uuid: Uuid,
    pub lane: u32,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMsg {
    pub uuid: Uuid,
    pub t: f64,
    pub probabilities: [f64; 3],
    pub predicted_class: Class,
    pub top3: Vec<TopEntry>,
    /// Frame ingest to fan-out, measured by the broker.
    pub latency_ms: f64,
    /// Wall clock at frame ingest (ms since the Unix epoch).
    pub ingest_unix_ms: f64,
    /// Uuid of the vehicle in each occupied slot of the last window frame.
    pub neighbours: BTreeMap<String, Uuid>,
}

/// Broker → client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Opened { uuid: Uuid },
    Warming { uuid: Uuid, t: f64, frames: usize },
    Prediction(PredictionMsg),
    SessionClosed { uuid: Uuid, reason: CloseReason },
    Roster { t: f64, vehicles: Vec<RosterEntry> },
    /// Messages dropped from this client's queue since the last delivery.
    Gap { dropped: u64 },
    Error { uuid: Option<Uuid>, reason: ErrorReason, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    Closed,
    VehicleLeft,
    NoSubscribers,
    StreamEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReason {
    NotFound,
    BadRequest,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    #[default]
    Lrp,
    Ig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: MethodKind,
    pub ln_rule: LnRule,
    pub omega_variant: OmegaVariant,
    pub epsilon: f64,
    pub ig_steps: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Lrp,
            ln_rule: LnRule::Omega,
            omega_variant: OmegaVariant::Literal,
            epsilon: DEFAULT_EPSILON,
            ig_steps: xlane_core::ig::DEFAULT_STEPS,
        }
    }
}

/// `POST /predict` body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub window: WindowFile,
    #[serde(default)]
    pub config: MethodConfig,
    /// Class to explain; the predicted class when absent.
    #[serde(default)]
    pub class: Option<Class>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperFeatureArrays {
    pub movement: Vec<f64>,
    pub position: Vec<f64>,
}

/// `POST /predict` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probabilities: [f64; 3],
    pub predicted_class: Class,
    pub explained_class: Class,
    pub method: String,
    /// 4 × 49, row-major by frame.
    pub relevance: Vec<Vec<f64>>,
    pub super_features: SuperFeatureArrays,
    pub top3: Vec<TopEntry>,
}
