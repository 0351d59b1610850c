//! Neighbour extraction, window assembly and labeling.

use xlane_core::window::{
    canonical_timestamps, flat_index, ObservationWindow, Slot, FRAMES, FRAME_JITTER_S, FRAME_SPACING_S, HORIZON_S, SLOTS,
};
use xlane_core::{Class, Window};

use crate::error::{Result, TwinError};
use crate::frame::{Frame, FrameVehicle, RawId};

/// Indices into `frame.vehicles` for each slot; `None` when the region is empty.
pub type SlotAssignment = [Option<usize>; SLOTS];

fn region(q: &FrameVehicle, o: &FrameVehicle) -> Option<Slot> {
    let ahead = o.features.x > q.features.x;
    let lane = o.lane as i64 - q.lane as i64;
    Some(match (lane, ahead) {
        (1, true) => Slot::LeftFront,
        (0, true) => Slot::Front,
        (-1, true) => Slot::RightFront,
        (1, false) => Slot::LeftRear,
        (0, false) => Slot::Rear,
        (-1, false) => Slot::RightRear,
        _ => return None,
    })
}

/// Closest vehicle per region (by longitudinal distance, ties by raw id). A vehicle
/// level with the query counts as behind it.
pub fn extract_neighbors(frame: &Frame, q: RawId) -> Result<SlotAssignment> {
    let qi = frame
        .vehicles
        .iter()
        .position(|v| v.raw_id == q)
        .ok_or(TwinError::Lookup(q, frame.timestamp))?;
    let qv = &frame.vehicles[qi];
    let mut slots: SlotAssignment = [None; SLOTS];
    slots[Slot::Query.index()] = Some(qi);
    for (i, o) in frame.vehicles.iter().enumerate() {
        if i == qi {
            continue;
        }
        let Some(slot) = region(qv, o) else { continue };
        let cell = &mut slots[slot.index()];
        let closer = match *cell {
            None => true,
            Some(j) => {
                let cur = &frame.vehicles[j];
                let d_new = (o.features.x - qv.features.x).abs();
                let d_cur = (cur.features.x - qv.features.x).abs();
                d_new < d_cur || (d_new == d_cur && o.raw_id < cur.raw_id)
            }
        };
        if closer {
            *cell = Some(i);
        }
    }
    Ok(slots)
}

/// A window plus the raw ids occupying each slot in each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltWindow {
    pub window: Window,
    pub slots: [[Option<RawId>; SLOTS]; FRAMES],
}

fn closest_frame<'a>(history: &[&'a Frame], target: f64) -> Option<&'a Frame> {
    history
        .iter()
        .filter(|f| (f.timestamp - target).abs() <= FRAME_JITTER_S)
        .min_by(|a, b| (a.timestamp - target).abs().total_cmp(&(b.timestamp - target).abs()))
        .copied()
}

/// Assemble the window ending at `t` for vehicle `q`. Longitudinal positions are made
/// relative to the query's position in the last frame; missing neighbours are masked
/// and sentinel-filled.
pub fn build_window<'a>(history: impl IntoIterator<Item = &'a Frame>, q: RawId, t: f64) -> Result<BuiltWindow> {
    let history: Vec<&Frame> = history.into_iter().collect();
    let targets = canonical_timestamps(t);
    let mut frames = Vec::with_capacity(FRAMES);
    for &target in &targets {
        let f = closest_frame(&history, target)
            .ok_or_else(|| TwinError::NotReady(format!("no frame near t={target:.2}s")))?;
        if f.vehicle(q).is_none() {
            return Err(TwinError::NotReady(format!("vehicle {q} absent at t={:.2}s", f.timestamp)));
        }
        frames.push(f);
    }
    let span = frames[FRAMES - 1].timestamp - frames[0].timestamp;
    if span < 3.0 * FRAME_SPACING_S - 1e-6 {
        return Err(TwinError::NotReady(format!("vehicle {q} has {span:.2}s of history")));
    }
    let origin = frames[FRAMES - 1].vehicle(q).expect("checked").features.x;

    let mut values = vec![0.0; xlane_core::window::WINDOW_LEN];
    let mut mask = [[false; SLOTS]; FRAMES];
    let mut slots = [[None; SLOTS]; FRAMES];
    for (k, f) in frames.iter().enumerate() {
        let assignment = extract_neighbors(f, q)?;
        for (s, idx) in assignment.iter().enumerate() {
            let Some(i) = *idx else { continue };
            let v = &f.vehicles[i];
            let mut feats = v.features;
            feats.x -= origin;
            for (j, val) in feats.to_array().into_iter().enumerate() {
                values[flat_index(k, s, j)] = val;
            }
            mask[k][s] = true;
            slots[k][s] = Some(v.raw_id);
        }
    }
    let timestamps = [
        frames[0].timestamp,
        frames[1].timestamp,
        frames[2].timestamp,
        frames[3].timestamp,
    ];
    let mut window = ObservationWindow::new(timestamps, values, mask)?;
    window.pad_missing();
    Ok(BuiltWindow { window, slots })
}

/// Left/right if the query's lane index changes in `(t, t + 2.5 s]` (first change wins),
/// keep otherwise.
pub fn label_window<'a>(frames: impl IntoIterator<Item = &'a Frame>, q: RawId, t: f64) -> Result<Class> {
    let mut relevant: Vec<&Frame> = frames
        .into_iter()
        .filter(|f| f.timestamp >= t - FRAME_JITTER_S && f.timestamp <= t + HORIZON_S + FRAME_JITTER_S)
        .collect();
    relevant.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let base = relevant
        .iter()
        .find(|f| (f.timestamp - t).abs() <= FRAME_JITTER_S)
        .ok_or_else(|| TwinError::InsufficientFuture(format!("no frame at t={t:.2}s")))?
        .vehicle(q)
        .ok_or(TwinError::Lookup(q, t))?
        .lane;
    let last = relevant.last().map(|f| f.timestamp).unwrap_or(f64::NEG_INFINITY);
    if last < t + HORIZON_S - FRAME_JITTER_S {
        return Err(TwinError::InsufficientFuture(format!(
            "frames end at {last:.2}s, need {:.2}s",
            t + HORIZON_S
        )));
    }
    for f in relevant.iter().filter(|f| f.timestamp > t + FRAME_JITTER_S) {
        let v = f.vehicle(q).ok_or_else(|| {
            TwinError::InsufficientFuture(format!("vehicle {q} leaves before t={:.2}s", f.timestamp))
        })?;
        if v.lane > base {
            return Ok(Class::Left);
        }
        if v.lane < base {
            return Ok(Class::Right);
        }
    }
    Ok(Class::Keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xlane_core::VehicleFeatures;

    fn veh(raw_id: RawId, lane: u32, x: f64) -> FrameVehicle {
        FrameVehicle {
            raw_id,
            lane,
            features: VehicleFeatures {
                vx: 25.0,
                x,
                y: (lane as f64 + 0.5) * 3.5,
                n_left: 2.0 - lane as f64,
                n_right: lane as f64,
                ..Default::default()
            },
        }
    }

    #[test]
    fn lone_query_masks_six_slots() {
        let f = Frame {
            timestamp: 0.0,
            vehicles: vec![veh(5, 1, 100.0)],
        };
        let s = extract_neighbors(&f, 5).unwrap();
        assert_eq!(s.iter().filter(|x| x.is_some()).count(), 1);
        assert_eq!(s[Slot::Query.index()], Some(0));
        assert!(matches!(extract_neighbors(&f, 6), Err(TwinError::Lookup(6, _))));
    }

    #[test]
    fn closest_ahead_wins() {
        let f = Frame {
            timestamp: 0.0,
            vehicles: vec![veh(1, 1, 100.0), veh(2, 1, 160.0), veh(3, 1, 130.0), veh(4, 2, 90.0)],
        };
        let s = extract_neighbors(&f, 1).unwrap();
        assert_eq!(s[Slot::Front.index()], Some(2));
        assert_eq!(s[Slot::LeftRear.index()], Some(3));
        assert_eq!(s[Slot::Rear.index()], None);
    }

    fn track(times: &[f64], lanes: &[u32]) -> Vec<Frame> {
        times
            .iter()
            .zip(lanes)
            .map(|(&t, &l)| Frame {
                timestamp: t,
                vehicles: vec![veh(7, l, 25.0 * t)],
            })
            .collect()
    }

    #[test]
    fn window_needs_one_and_a_half_seconds() {
        let frames = track(&[0.0, 0.5, 1.0, 1.5], &[1; 4]);
        let w = build_window(&frames, 7, 1.5).unwrap();
        assert_eq!(w.window.timestamps(), &[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(w.window.get(3, Slot::Query, xlane_core::Feature::X), 0.0);
        assert_eq!(w.window.get(0, Slot::Query, xlane_core::Feature::X), -37.5);
        assert!(matches!(build_window(&frames[1..], 7, 1.5), Err(TwinError::NotReady(_))));
        let late = track(&[0.01, 0.5, 1.0, 1.5], &[1; 4]);
        assert!(matches!(build_window(&late, 7, 1.5), Err(TwinError::NotReady(_))));
    }

    #[test]
    fn labels_follow_first_change_within_horizon() {
        let times: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let t = 0.0;
        assert_eq!(label_window(&track(&times, &[2, 2, 3, 3, 3, 3, 3, 3]), 7, t).unwrap(), Class::Left);
        assert_eq!(label_window(&track(&times, &[2; 8]), 7, t).unwrap(), Class::Keep);
        assert_eq!(label_window(&track(&times, &[2, 1, 2, 3, 3, 3, 3, 3]), 7, t).unwrap(), Class::Right);
        // crossing after t + 2.5 s only shows up in the frame at 3.0 s
        assert_eq!(label_window(&track(&times, &[2, 2, 2, 2, 2, 2, 3, 3]), 7, t).unwrap(), Class::Keep);
        assert!(matches!(
            label_window(&track(&times[..5], &[2; 5]), 7, t),
            Err(TwinError::InsufficientFuture(_))
        ));
    }
}
