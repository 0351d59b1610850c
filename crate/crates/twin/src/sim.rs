//! Straight multi-lane segment with car-following and scripted stochastic lane changes.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlane_core::VehicleFeatures;

use crate::config::SimConfig;
use crate::error::{Result, TwinError};
use crate::frame::{Frame, FrameVehicle, RawId, RAW_ID_MAX};

pub const VEHICLE_LENGTH: f64 = 4.5;
const IDM_ACCEL: f64 = 1.5;
const IDM_DECEL: f64 = 2.0;
const IDM_MIN_GAP: f64 = 2.0;
const IDM_HEADWAY: f64 = 1.2;
const MAX_BRAKE: f64 = 8.0;
const SPAWN_CLEARANCE: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChange {
    pub from: u32,
    pub to: u32,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimVehicle {
    pub raw_id: RawId,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub vy: f64,
    pub desired_speed: f64,
    pub lane: u32,
    pub change: Option<LaneChange>,
}

impl SimVehicle {
    fn occupies(&self, lane: u32) -> bool {
        match self.change {
            Some(c) => c.from == lane || c.to == lane,
            None => self.lane == lane,
        }
    }
}

/// A lane change as scripted by the simulator; `crossing` is when the vehicle center
/// passes the lane boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChangeEvent {
    pub raw_id: RawId,
    pub from: u32,
    pub to: u32,
    pub start: f64,
    pub crossing: f64,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    time: f64,
    frame_index: u64,
    vehicles: Vec<SimVehicle>,
    in_use: BTreeSet<RawId>,
    next_raw_id: RawId,
    events: Vec<LaneChangeEvent>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            time: 0.0,
            frame_index: 0,
            vehicles: Vec::new(),
            in_use: BTreeSet::new(),
            next_raw_id: 1,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn vehicles(&self) -> &[SimVehicle] {
        &self.vehicles
    }

    /// Lane changes started so far.
    pub fn events(&self) -> &[LaneChangeEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<LaneChangeEvent> {
        std::mem::take(&mut self.events)
    }

    fn allocate_raw_id(&mut self) -> Option<RawId> {
        if self.in_use.len() >= RAW_ID_MAX as usize {
            return None;
        }
        loop {
            let id = self.next_raw_id;
            self.next_raw_id = id % RAW_ID_MAX + 1;
            if self.in_use.insert(id) {
                return Some(id);
            }
        }
    }

    /// Place a vehicle at `x` in the center of `lane`.
    pub fn spawn_vehicle(&mut self, lane: u32, x: f64, speed: f64, desired_speed: f64) -> Result<RawId> {
        if lane >= self.cfg.lane_count {
            return Err(TwinError::Config(format!("lane {lane} out of range")));
        }
        let raw_id = self
            .allocate_raw_id()
            .ok_or_else(|| TwinError::Config("all raw ids in use".into()))?;
        self.vehicles.push(SimVehicle {
            raw_id,
            x,
            y: self.cfg.lane_center(lane),
            speed,
            vy: 0.0,
            desired_speed,
            lane,
            change: None,
        });
        Ok(raw_id)
    }

    /// Start a lane change now, bypassing the random decision and the gap check.
    pub fn force_lane_change(&mut self, raw_id: RawId, dir: Direction) -> Result<LaneChangeEvent> {
        let i = self
            .vehicles
            .iter()
            .position(|v| v.raw_id == raw_id)
            .ok_or(TwinError::Lookup(raw_id, self.time))?;
        self.start_change(i, dir)
            .ok_or_else(|| TwinError::Config(format!("vehicle {raw_id} cannot change {dir:?}")))
    }

    fn target_lane(&self, lane: u32, dir: Direction) -> Option<u32> {
        match dir {
            Direction::Left if lane + 1 < self.cfg.lane_count => Some(lane + 1),
            Direction::Right if lane > 0 => Some(lane - 1),
            _ => None,
        }
    }

    fn start_change(&mut self, i: usize, dir: Direction) -> Option<LaneChangeEvent> {
        let v = &self.vehicles[i];
        if v.change.is_some() {
            return None;
        }
        let to = self.target_lane(v.lane, dir)?;
        let ev = LaneChangeEvent {
            raw_id: v.raw_id,
            from: v.lane,
            to,
            start: self.time,
            crossing: self.time + 0.5 * self.cfg.lane_change_duration,
        };
        self.vehicles[i].change = Some(LaneChange {
            from: ev.from,
            to,
            start: self.time,
        });
        self.events.push(ev);
        Some(ev)
    }

    /// Nearest vehicle ahead of `i` occupying any lane that `i` occupies.
    fn leader(&self, i: usize) -> Option<&SimVehicle> {
        let me = &self.vehicles[i];
        let lanes: Vec<u32> = match me.change {
            Some(c) => vec![c.from, c.to],
            None => vec![me.lane],
        };
        self.vehicles
            .iter()
            .enumerate()
            .filter(|&(j, o)| j != i && o.x > me.x && lanes.iter().any(|&l| o.occupies(l)))
            .map(|(_, o)| o)
            .min_by(|a, b| a.x.total_cmp(&b.x))
    }

    fn idm(&self, i: usize) -> f64 {
        let me = &self.vehicles[i];
        let free = 1.0 - (me.speed / me.desired_speed).powi(4);
        let interaction = match self.leader(i) {
            Some(l) => {
                let gap = (l.x - me.x - VEHICLE_LENGTH).max(0.1);
                let dv = me.speed - l.speed;
                let s_star = IDM_MIN_GAP
                    + (me.speed * IDM_HEADWAY + me.speed * dv / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt()))
                        .max(0.0);
                (s_star / gap).powi(2)
            }
            None => 0.0,
        };
        (IDM_ACCEL * (free - interaction)).clamp(-MAX_BRAKE, IDM_ACCEL)
    }

    fn gap_is_safe(&self, i: usize, lane: u32) -> bool {
        let me = &self.vehicles[i];
        self.vehicles.iter().enumerate().all(|(j, o)| {
            if j == i || !o.occupies(lane) {
                return true;
            }
            let dx = o.x - me.x;
            if dx >= 0.0 {
                dx - VEHICLE_LENGTH > 10.0 + 1.5 * (me.speed - o.speed).max(0.0)
            } else {
                -dx - VEHICLE_LENGTH > 8.0 + 1.5 * (o.speed - me.speed).max(0.0)
            }
        })
    }

    fn decide_lane_changes(&mut self, dt: f64) {
        for i in 0..self.vehicles.len() {
            if self.vehicles[i].change.is_some() {
                continue;
            }
            let me = &self.vehicles[i];
            let blocked = self
                .leader(i)
                .is_some_and(|l| l.x - me.x < 60.0 && l.speed < me.desired_speed - 2.0);
            let rate = self.cfg.lane_change_propensity * if blocked { self.cfg.overtake_boost } else { 1.0 };
            if self.rng.gen::<f64>() >= rate * dt {
                continue;
            }
            let prefer_left = blocked || self.rng.gen_bool(0.5);
            let order = if prefer_left {
                [Direction::Left, Direction::Right]
            } else {
                [Direction::Right, Direction::Left]
            };
            let lane = self.vehicles[i].lane;
            for dir in order {
                if let Some(to) = self.target_lane(lane, dir) {
                    if self.gap_is_safe(i, to) {
                        self.start_change(i, dir);
                        break;
                    }
                }
            }
        }
    }

    /// Lateral offset from the origin lane center and lateral speed at `tau` seconds into
    /// a change: trapezoidal speed profile with linear ramps of `heading_ramp` seconds.
    pub fn lateral_profile(&self, tau: f64) -> (f64, f64) {
        let d = self.cfg.lane_change_duration;
        let r = self.cfg.heading_ramp;
        let w = self.cfg.lane_width;
        let vp = w / (d - r);
        let tau = tau.clamp(0.0, d);
        if tau < r {
            (vp * tau * tau / (2.0 * r), vp * tau / r)
        } else if tau <= d - r {
            (vp * (r / 2.0 + tau - r), vp)
        } else {
            let rem = d - tau;
            (w - vp * rem * rem / (2.0 * r), vp * rem / r)
        }
    }

    fn maybe_spawn(&mut self, dt: f64) {
        if self.rng.gen::<f64>() >= self.cfg.spawn_rate * dt {
            return;
        }
        let lane = self.rng.gen_range(0..self.cfg.lane_count);
        let desired = self.rng.gen_range(self.cfg.speed_min..=self.cfg.speed_max);
        let nearest = self
            .vehicles
            .iter()
            .filter(|o| o.occupies(lane))
            .min_by(|a, b| a.x.total_cmp(&b.x));
        let speed = match nearest {
            Some(o) if o.x < SPAWN_CLEARANCE + VEHICLE_LENGTH => return,
            Some(o) if o.x < 150.0 => desired.min(o.speed),
            _ => desired,
        };
        let _ = self.spawn_vehicle(lane, 0.0, speed, desired);
    }

    /// Advance by `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "step_sim requires dt > 0");
        self.maybe_spawn(dt);
        self.decide_lane_changes(dt);

        let accel: Vec<f64> = (0..self.vehicles.len()).map(|i| self.idm(i)).collect();
        let end_time = self.time + dt;
        for (v, a) in self.vehicles.iter_mut().zip(accel) {
            let new_speed = (v.speed + a * dt).max(0.0);
            v.x += 0.5 * (v.speed + new_speed) * dt;
            v.speed = new_speed;
        }
        for i in 0..self.vehicles.len() {
            if let Some(c) = self.vehicles[i].change {
                let (off, vy) = self.lateral_profile(end_time - c.start);
                let sign = if c.to > c.from { 1.0 } else { -1.0 };
                let v = &mut self.vehicles[i];
                v.y = self.cfg.lane_center(c.from) + sign * off;
                v.vy = sign * vy;
                if end_time - c.start >= self.cfg.lane_change_duration - 1e-9 {
                    v.y = self.cfg.lane_center(c.to);
                    v.vy = 0.0;
                    v.change = None;
                }
            }
            let lane = self.cfg.lane_of(self.vehicles[i].y);
            self.vehicles[i].lane = lane;
        }
        self.resolve_overlaps();

        let length = self.cfg.segment_length;
        let in_use = &mut self.in_use;
        self.vehicles.retain(|v| {
            let keep = v.x <= length;
            if !keep {
                in_use.remove(&v.raw_id);
            }
            keep
        });
        self.time = end_time;
    }

    /// Hard guarantee on top of car-following: same-lane vehicles never overlap.
    fn resolve_overlaps(&mut self) {
        let mut order: Vec<usize> = (0..self.vehicles.len()).collect();
        order.sort_by(|&a, &b| self.vehicles[b].x.total_cmp(&self.vehicles[a].x));
        for lane in 0..self.cfg.lane_count {
            let mut front: Option<(f64, f64)> = None;
            for &i in &order {
                let v = &mut self.vehicles[i];
                if v.lane != lane {
                    continue;
                }
                if let Some((fx, fs)) = front {
                    let limit = fx - VEHICLE_LENGTH - 0.5;
                    if v.x > limit {
                        v.x = limit;
                        v.speed = v.speed.min(fs);
                    }
                }
                front = Some((v.x, v.speed));
            }
        }
    }

    pub fn features(&self, v: &SimVehicle) -> VehicleFeatures {
        VehicleFeatures {
            vx: v.speed,
            vy: v.vy,
            psi: v.vy.atan2(v.speed),
            x: v.x,
            y: v.y,
            n_left: (self.cfg.lane_count - 1 - v.lane) as f64,
            n_right: v.lane as f64,
        }
    }

    /// Snapshot of the current state.
    pub fn frame(&self) -> Frame {
        Frame {
            timestamp: self.time,
            vehicles: self
                .vehicles
                .iter()
                .map(|v| FrameVehicle {
                    raw_id: v.raw_id,
                    lane: v.lane,
                    features: self.features(v),
                })
                .collect(),
        }
    }

    /// Run one frame period of substeps and return the frame at the new time.
    pub fn next_frame(&mut self) -> Frame {
        let dt = self.cfg.dt();
        for _ in 0..self.cfg.substeps {
            self.step(dt);
        }
        self.frame_index += 1;
        self.time = self.frame_index as f64 * self.cfg.frame_period();
        self.frame()
    }

    /// Advance without recording, e.g. to fill the road before sampling.
    pub fn warm_up(&mut self, seconds: f64) {
        let n = (seconds * self.cfg.frame_rate_hz).ceil() as u64;
        for _ in 0..n {
            self.next_frame();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            spawn_rate: 0.0,
            lane_change_propensity: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn empty_road_stays_empty() {
        let mut sim = Simulator::new(quiet()).unwrap();
        for _ in 0..20 {
            assert!(sim.next_frame().vehicles.is_empty());
        }
        assert_eq!(sim.time(), 10.0);
    }

    #[test]
    fn lone_vehicle_cruises_straight() {
        let mut sim = Simulator::new(quiet()).unwrap();
        let id = sim.spawn_vehicle(1, 0.0, 30.0, 30.0).unwrap();
        for k in 1..=10 {
            let f = sim.next_frame();
            let v = f.vehicle(id).unwrap();
            assert!((v.features.x - 15.0 * k as f64).abs() < 1e-9);
            assert_eq!(v.features.psi, 0.0);
            assert_eq!(v.features.vy, 0.0);
            assert_eq!(v.lane, 1);
        }
    }

    #[test]
    fn lateral_profile_is_continuous_and_symmetric() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let d = sim.config().lane_change_duration;
        let (mid, _) = sim.lateral_profile(d / 2.0);
        assert!((mid - 1.75).abs() < 1e-12);
        assert_eq!(sim.lateral_profile(0.0), (0.0, 0.0));
        let (end, vy) = sim.lateral_profile(d);
        assert!((end - 3.5).abs() < 1e-12 && vy.abs() < 1e-12);
        let mut prev = 0.0;
        for i in 1..=400 {
            let (y, _) = sim.lateral_profile(d * i as f64 / 400.0);
            assert!(y >= prev && y - prev < 0.05);
            prev = y;
        }
    }

    #[test]
    fn raw_ids_cycle_and_skip_live_ones() {
        let mut sim = Simulator::new(quiet()).unwrap();
        sim.next_raw_id = RAW_ID_MAX - 1;
        let a = sim.spawn_vehicle(0, 0.0, 20.0, 20.0).unwrap();
        let b = sim.spawn_vehicle(1, 0.0, 20.0, 20.0).unwrap();
        let c = sim.spawn_vehicle(2, 0.0, 20.0, 20.0).unwrap();
        assert_eq!((a, b, c), (RAW_ID_MAX - 1, RAW_ID_MAX, 1));
        sim.next_raw_id = RAW_ID_MAX;
        assert_eq!(sim.spawn_vehicle(0, 50.0, 20.0, 20.0).unwrap(), 2);
    }
}
