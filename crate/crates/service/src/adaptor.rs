//! Live adaptor: validates raw frames, stamps vehicles with uuids and resolves lane counts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use uuid::Uuid;
use xlane_core::VehicleFeatures;
use xlane_twin::{Frame, FrameVehicle, RawId};

use crate::identity::{IdentityCache, DEFAULT_TTL_S};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedVehicle {
    pub uuid: Uuid,
    pub raw_id: RawId,
    pub lane: u32,
    pub features: VehicleFeatures,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnrichedFrame {
    pub timestamp: f64,
    pub vehicles: Vec<EnrichedVehicle>,
}

impl EnrichedFrame {
    pub fn raw_of(&self, uuid: Uuid) -> Option<RawId> {
        self.vehicles.iter().find(|v| v.uuid == uuid).map(|v| v.raw_id)
    }

    pub fn uuid_of(&self, raw: RawId) -> Option<Uuid> {
        self.vehicles.iter().find(|v| v.raw_id == raw).map(|v| v.uuid)
    }

    /// The underlying raw frame, with the resolved lane counts.
    pub fn to_frame(&self) -> Frame {
        Frame {
            timestamp: self.timestamp,
            vehicles: self
                .vehicles
                .iter()
                .map(|v| FrameVehicle {
                    raw_id: v.raw_id,
                    lane: v.lane,
                    features: v.features,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptorConfig {
    pub lane_count: u32,
    pub ttl: f64,
    pub snapshot_path: Option<PathBuf>,
    /// Persist the identity cache every this many accepted frames.
    pub snapshot_every: usize,
    pub seed: Option<u64>,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            ttl: DEFAULT_TTL_S,
            snapshot_path: None,
            snapshot_every: 10,
            seed: None,
        }
    }
}

pub struct Adaptor {
    cfg: AdaptorConfig,
    cache: IdentityCache,
    last_t: Option<f64>,
    dropped: u64,
    since_snapshot: usize,
}

impl Adaptor {
    pub fn new(cfg: AdaptorConfig) -> Self {
        let cache = IdentityCache::new(cfg.ttl, cfg.seed);
        Self {
            cfg,
            cache,
            last_t: None,
            dropped: 0,
            since_snapshot: 0,
        }
    }

    /// Resume from the snapshot at `cfg.snapshot_path` when one exists.
    pub fn restore(cfg: AdaptorConfig) -> Result<Self> {
        match &cfg.snapshot_path {
            Some(p) if p.exists() => {
                let cache = IdentityCache::load(p)?;
                log::info!("restored {} identities from {}", cache.len(), p.display());
                Ok(Self {
                    cfg,
                    cache,
                    last_t: None,
                    dropped: 0,
                    since_snapshot: 0,
                })
            }
            _ => Ok(Self::new(cfg)),
        }
    }

    pub fn cache(&self) -> &IdentityCache {
        &self.cache
    }

    /// Frames rejected so far.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Decode one JSON frame record.
    pub fn process_record(&mut self, bytes: &[u8]) -> Option<EnrichedFrame> {
        match serde_json::from_slice::<Frame>(bytes) {
            Ok(f) => self.process_frame(f),
            Err(e) => self.reject(format!("undecodable record: {e}")),
        }
    }

    pub fn process_frame(&mut self, frame: Frame) -> Option<EnrichedFrame> {
        if let Err(e) = frame.validate() {
            return self.reject(e.to_string());
        }
        if let Some(prev) = self.last_t {
            if frame.timestamp <= prev {
                return self.reject(format!("timestamp {} not after {prev}", frame.timestamp));
            }
        }
        if let Some(v) = frame.vehicles.iter().find(|v| v.lane >= self.cfg.lane_count) {
            return self.reject(format!("vehicle {} on lane {}", v.raw_id, v.lane));
        }
        let t = frame.timestamp;
        self.last_t = Some(t);
        let top = (self.cfg.lane_count - 1) as f64;
        let vehicles = frame
            .vehicles
            .into_iter()
            .map(|v| {
                let mut features = v.features;
                features.n_right = v.lane as f64;
                features.n_left = top - v.lane as f64;
                EnrichedVehicle {
                    uuid: self.cache.assign(v.raw_id, t),
                    raw_id: v.raw_id,
                    lane: v.lane,
                    features,
                }
            })
            .collect();
        self.cache.prune(t);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.cfg.snapshot_every {
            self.snapshot();
        }
        Some(EnrichedFrame { timestamp: t, vehicles })
    }

    /// Persist the identity cache now; failures are logged, not fatal.
    pub fn snapshot(&mut self) {
        self.since_snapshot = 0;
        if let Some(p) = &self.cfg.snapshot_path {
            if let Err(e) = self.cache.save(p) {
                log::error!("identity snapshot to {} failed: {e}", p.display());
            }
        }
    }

    fn reject(&mut self, why: String) -> Option<EnrichedFrame> {
        self.dropped += 1;
        log::warn!("dropping frame: {why}");
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vehicle(raw_id: RawId, lane: u32) -> FrameVehicle {
        FrameVehicle {
            raw_id,
            lane,
            features: VehicleFeatures {
                vx: 30.0,
                ..Default::default()
            },
        }
    }

    #[test]
    fn malformed_frames_are_counted_and_skipped() {
        let mut a = Adaptor::new(AdaptorConfig {
            seed: Some(3),
            ..Default::default()
        });
        let f = |t: f64| Frame {
            timestamp: t,
            vehicles: vec![vehicle(4, 2)],
        };
        assert!(a.process_frame(f(0.5)).is_some());
        assert!(a.process_record(b"{not json").is_none());
        assert!(a.process_frame(f(0.5)).is_none());
        assert!(a.process_frame(Frame {
            timestamp: 1.0,
            vehicles: vec![vehicle(4, 7)]
        })
        .is_none());
        let e = a.process_frame(f(1.0)).unwrap();
        assert_eq!(a.dropped(), 3);
        assert_eq!(e.vehicles[0].features.n_left, 0.0);
        assert_eq!(e.vehicles[0].features.n_right, 2.0);
    }

    #[test]
    fn empty_frame_passes_through() {
        let mut a = Adaptor::new(AdaptorConfig::default());
        let e = a.process_frame(Frame {
            timestamp: 0.0,
            vehicles: vec![],
        });
        assert_eq!(e.unwrap().vehicles.len(), 0);
    }
}
