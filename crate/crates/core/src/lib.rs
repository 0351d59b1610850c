//! Explainable lane-change prediction core.
//!
//! A layer-normalized LSTM classifies a four-frame [`ObservationWindow`] around a query
//! vehicle into left / keep / right. Predictions are explained with layer-wise relevance
//! propagation ([`lrp::explain`], including the Ω rule for layer normalization) or with
//! Integrated Gradients ([`ig::integrated_gradients`]), and condensed into per-vehicle
//! movement/position super-features ([`explanation`]).
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`,
//! which is what the rest of the workspace uses.

pub mod error;
pub mod explanation;
pub mod grad;
pub mod ig;
pub mod layer_norm;
pub mod lrp;
pub mod lstm;
pub mod model_io;
pub mod relevance;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use window::{Class, Feature, FillMode, Slot, SuperFeature, VehicleFeatures};

pub type Params = lstm::LnLstmParams<f64>;
pub type Window = window::ObservationWindow<f64>;
pub type Trace = lstm::ActivationTrace<f64>;
pub type Prediction = lstm::PredictionOutput<f64>;
pub type Relevance = relevance::RelevanceMap<f64>;
pub type Ledger = relevance::SinkLedger<f64>;
pub type SuperFeatures = explanation::SuperFeatureExplanation<f64>;
pub type LayerNorm = layer_norm::LayerNormParams<f64>;
