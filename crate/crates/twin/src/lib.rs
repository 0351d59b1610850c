//! Synthetic highway twin: a seeded multi-lane simulator, the frame record format,
//! neighbour extraction into 7-slot observation windows, lane-change labels,
//! label-balanced datasets and paced replay.

pub mod config;
pub mod dataset;
pub mod error;
pub mod frame;
pub mod observe;
pub mod replay;
pub mod sim;

pub use config::SimConfig;
pub use dataset::{generate_dataset, Dataset, LabeledWindow, Split};
pub use error::{Result, TwinError};
pub use frame::{Frame, FrameVehicle, RawId, RAW_ID_MAX};
pub use observe::{build_window, extract_neighbors, label_window, BuiltWindow};
pub use replay::{stream_replay, FrameSource, RecordSource};
pub use sim::Simulator;
