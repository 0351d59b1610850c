use std::path::Path;

use serde::{Deserialize, Serialize};
use xlane_core::window::FRAME_SPACING_S;

use crate::error::{Result, TwinError};

/// Road and traffic parameters of the simulator. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub lane_count: u32,
    /// m
    pub lane_width: f64,
    /// m
    pub segment_length: f64,
    /// vehicles per second, over all lanes
    pub spawn_rate: f64,
    /// desired speed range, m/s
    pub speed_min: f64,
    pub speed_max: f64,
    /// lane changes per vehicle per second on a free road
    pub lane_change_propensity: f64,
    /// extra factor applied when the leader is close and slower
    pub overtake_boost: f64,
    /// seconds from leaving the lane center to reaching the target center
    pub lane_change_duration: f64,
    /// rise time of the lateral speed (and therefore heading)
    pub heading_ramp: f64,
    pub frame_rate_hz: f64,
    /// integration substeps per frame
    pub substeps: u32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            lane_width: 3.5,
            segment_length: 1200.0,
            spawn_rate: 0.9,
            speed_min: 22.0,
            speed_max: 36.0,
            lane_change_propensity: 0.04,
            overtake_boost: 4.0,
            lane_change_duration: 6.0,
            heading_ramp: 1.5,
            frame_rate_hz: 2.0,
            substeps: 5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TwinError::Config(m.into()));
        if self.lane_count < 2 {
            return bad("lane_count must be at least 2");
        }
        if (1.0 / self.frame_rate_hz - FRAME_SPACING_S).abs() > 1e-9 {
            return bad("frame_rate_hz must match the 0.5 s window spacing (2 Hz)");
        }
        if !(self.lane_width > 0.0 && self.segment_length > 0.0) {
            return bad("lane_width and segment_length must be positive");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must satisfy 0 < speed_min <= speed_max");
        }
        if self.spawn_rate < 0.0 || self.lane_change_propensity < 0.0 || self.overtake_boost < 1.0 {
            return bad("rates must be non-negative and overtake_boost >= 1");
        }
        if !(self.heading_ramp > 0.0 && self.lane_change_duration >= 2.0 * self.heading_ramp) {
            return bad("lane_change_duration must cover two heading ramps");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        Ok(())
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn dt(&self) -> f64 {
        self.frame_period() / self.substeps as f64
    }

    pub fn lane_center(&self, lane: u32) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lane whose band contains `y` (0 = rightmost).
    pub fn lane_of(&self, y: f64) -> u32 {
        let l = (y / self.lane_width).floor();
        l.clamp(0.0, (self.lane_count - 1) as f64) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = SimConfig::from_toml_str("lane_count = 4\nseed = 9\n").unwrap();
        assert_eq!(cfg.lane_count, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.frame_rate_hz, 2.0);
        let s = toml::to_string(&cfg).unwrap();
        assert_eq!(SimConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn rejects_single_lane_and_wrong_rate() {
        assert!(SimConfig::from_toml_str("lane_count = 1").is_err());
        assert!(SimConfig::from_toml_str("frame_rate_hz = 10.0").is_err());
        assert!(SimConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn lane_geometry() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.lane_of(cfg.lane_center(2)), 2);
        assert_eq!(cfg.lane_of(3.49), 0);
        assert_eq!(cfg.lane_of(3.5), 1);
        assert_eq!(cfg.lane_of(-1.0), 0);
        assert_eq!(cfg.lane_of(100.0), 2);
    }
}
