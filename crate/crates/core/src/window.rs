//! Model input layout: four frames of seven vehicle slots with seven features each.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

pub const FRAMES: usize = 4;
pub const SLOTS: usize = 7;
pub const FEATURES_PER_VEHICLE: usize = 7;
pub const FRAME_WIDTH: usize = SLOTS * FEATURES_PER_VEHICLE;
pub const WINDOW_LEN: usize = FRAMES * FRAME_WIDTH;

/// Seconds between consecutive frames of a window.
pub const FRAME_SPACING_S: f64 = 0.5;
/// Allowed deviation from [`FRAME_SPACING_S`].
pub const FRAME_JITTER_S: f64 = 0.05;
/// Prediction horizon of the classifier.
pub const HORIZON_S: f64 = 2.5;

/// Longitudinal offset of a padded (absent) neighbour.
pub const SENTINEL_FAR_RANGE_M: f64 = 100.0;
/// Lateral offset of a padded neighbour in an adjacent lane.
pub const SENTINEL_LATERAL_M: f64 = 3.5;

/// Per-vehicle feature order inside a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Vx = 0,
    Vy = 1,
    Heading = 2,
    X = 3,
    Y = 4,
    LanesLeft = 5,
    LanesRight = 6,
}

impl Feature {
    pub const ALL: [Feature; FEATURES_PER_VEHICLE] = [
        Feature::Vx,
        Feature::Vy,
        Feature::Heading,
        Feature::X,
        Feature::Y,
        Feature::LanesLeft,
        Feature::LanesRight,
    ];

    pub fn super_feature(self) -> SuperFeature {
        match self {
            Feature::Vx | Feature::Vy | Feature::Heading => SuperFeature::Movement,
            _ => SuperFeature::Position,
        }
    }
}

/// Neighbour slot order; the query vehicle is always last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slot {
    LeftFront = 0,
    Front = 1,
    RightFront = 2,
    LeftRear = 3,
    Rear = 4,
    RightRear = 5,
    Query = 6,
}

impl Slot {
    pub const ALL: [Slot; SLOTS] = [
        Slot::LeftFront,
        Slot::Front,
        Slot::RightFront,
        Slot::LeftRear,
        Slot::Rear,
        Slot::RightRear,
        Slot::Query,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Slot> {
        Slot::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::LeftFront => "left-front",
            Slot::Front => "front",
            Slot::RightFront => "right-front",
            Slot::LeftRear => "left-rear",
            Slot::Rear => "rear",
            Slot::RightRear => "right-rear",
            Slot::Query => "query",
        }
    }

    /// Longitudinal sign (+1 ahead, -1 behind, 0 for the query vehicle).
    pub fn longitudinal_sign(self) -> f64 {
        match self {
            Slot::LeftFront | Slot::Front | Slot::RightFront => 1.0,
            Slot::LeftRear | Slot::Rear | Slot::RightRear => -1.0,
            Slot::Query => 0.0,
        }
    }

    /// Lateral sign (+1 left lane, -1 right lane, 0 own lane).
    pub fn lateral_sign(self) -> f64 {
        match self {
            Slot::LeftFront | Slot::LeftRear => 1.0,
            Slot::RightFront | Slot::RightRear => -1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuperFeature {
    Movement,
    Position,
}

impl SuperFeature {
    pub fn features(self) -> &'static [Feature] {
        match self {
            SuperFeature::Movement => &Feature::ALL[0..3],
            SuperFeature::Position => &Feature::ALL[3..7],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SuperFeature::Movement => "movement",
            SuperFeature::Position => "position",
        }
    }
}

/// Output classes, in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Left = 0,
    Keep = 1,
    Right = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Left, Class::Keep, Class::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Left => "left",
            Class::Keep => "keep",
            Class::Right => "right",
        }
    }
}

impl std::str::FromStr for Class {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Class::Left),
            "keep" => Ok(Class::Keep),
            "right" => Ok(Class::Right),
            other => Err(CoreError::Config(format!("unknown class {other:?}"))),
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kinematic and lane state of one vehicle at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleFeatures {
    pub vx: f64,
    pub vy: f64,
    pub psi: f64,
    pub x: f64,
    pub y: f64,
    pub n_left: f64,
    pub n_right: f64,
}

impl VehicleFeatures {
    pub fn to_array(&self) -> [f64; FEATURES_PER_VEHICLE] {
        [
            self.vx,
            self.vy,
            self.psi,
            self.x,
            self.y,
            self.n_left,
            self.n_right,
        ]
    }

    pub fn from_array(a: [f64; FEATURES_PER_VEHICLE]) -> Self {
        Self {
            vx: a[0],
            vy: a[1],
            psi: a[2],
            x: a[3],
            y: a[4],
            n_left: a[5],
            n_right: a[6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(CoreError::Window("vehicle features must be finite".into()));
        }
        if self.n_left < 0.0 || self.n_right < 0.0 {
            return Err(CoreError::Window("lane counts must be non-negative".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn flat_index(frame: usize, slot: usize, feature: usize) -> usize {
    frame * FRAME_WIDTH + slot * FEATURES_PER_VEHICLE + feature
}

/// Four consecutive frames around one query vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow<T> {
    timestamps: [f64; FRAMES],
    values: Vec<T>,
    mask: [[bool; SLOTS]; FRAMES],
}

impl<T: Scalar> ObservationWindow<T> {
    pub fn new(
        timestamps: [f64; FRAMES],
        values: Vec<T>,
        mask: [[bool; SLOTS]; FRAMES],
    ) -> Result<Self> {
        let w = Self {
            timestamps,
            values,
            mask,
        };
        w.validate()?;
        Ok(w)
    }

    /// A window with canonical timestamps `[-1.5, -1.0, -0.5, 0]` and every slot marked real.
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        Self::new(canonical_timestamps(0.0), values, [[true; SLOTS]; FRAMES])
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != WINDOW_LEN {
            return Err(CoreError::Window(format!(
                "expected {WINDOW_LEN} values, got {}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Window(format!("non-finite value at index {i}")));
        }
        for (k, m) in self.mask.iter().enumerate() {
            if !m[Slot::Query.index()] {
                return Err(CoreError::Window(format!("frame {k}: query slot masked")));
            }
        }
        for k in 0..FRAMES {
            for s in 0..SLOTS {
                for f in [Feature::LanesLeft, Feature::LanesRight] {
                    if self.values[flat_index(k, s, f as usize)] < T::zero() {
                        return Err(CoreError::Window(format!(
                            "frame {k} slot {s}: negative lane count"
                        )));
                    }
                }
            }
        }
        for k in 1..FRAMES {
            let dt = self.timestamps[k] - self.timestamps[k - 1];
            if !dt.is_finite() || (dt - FRAME_SPACING_S).abs() > FRAME_JITTER_S {
                return Err(CoreError::Window(format!(
                    "frame spacing {dt:.3}s between frames {} and {k}",
                    k - 1
                )));
            }
        }
        Ok(())
    }

    pub fn timestamps(&self) -> &[f64; FRAMES] {
        &self.timestamps
    }

    /// Time of the final frame.
    pub fn t(&self) -> f64 {
        self.timestamps[FRAMES - 1]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mask(&self) -> &[[bool; SLOTS]; FRAMES] {
        &self.mask
    }

    pub fn frame(&self, k: usize) -> &[T] {
        &self.values[k * FRAME_WIDTH..(k + 1) * FRAME_WIDTH]
    }

    #[inline]
    pub fn get(&self, frame: usize, slot: Slot, feature: Feature) -> T {
        self.values[flat_index(frame, slot.index(), feature as usize)]
    }

    /// Replace values in place, keeping timestamps and mask. Validity is re-checked.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::new(self.timestamps, values, self.mask)
    }

    pub fn cast<U: Scalar>(&self) -> ObservationWindow<U> {
        ObservationWindow {
            timestamps: self.timestamps,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            mask: self.mask,
        }
    }

    /// Fill value for every entry of the window under `mode`.
    pub fn fill_profile(&self, mode: &FillMode) -> Vec<T> {
        let mut out = vec![T::zero(); WINDOW_LEN];
        match mode {
            FillMode::Zero => {}
            FillMode::Mean(means) => {
                for k in 0..FRAMES {
                    for i in 0..FRAME_WIDTH {
                        out[k * FRAME_WIDTH + i] = T::lit(means[i]);
                    }
                }
            }
            FillMode::Sentinel => {
                let last_y = self.get(FRAMES - 1, Slot::Query, Feature::Y).as_f64();
                for k in 0..FRAMES {
                    let q = |f: Feature| self.get(k, Slot::Query, f).as_f64();
                    let mid_lanes = 0.5 * (q(Feature::LanesLeft) + q(Feature::LanesRight));
                    for slot in Slot::ALL {
                        let v = [
                            q(Feature::Vx),
                            0.0,
                            0.0,
                            q(Feature::X) + slot.longitudinal_sign() * SENTINEL_FAR_RANGE_M,
                            last_y + slot.lateral_sign() * SENTINEL_LATERAL_M,
                            mid_lanes,
                            mid_lanes,
                        ];
                        for (f, val) in v.into_iter().enumerate() {
                            out[flat_index(k, slot.index(), f)] = T::lit(val);
                        }
                    }
                }
            }
        }
        out
    }

    /// Overwrite every masked-out neighbour slot with its sentinel profile.
    pub fn pad_missing(&mut self) {
        let fill = self.fill_profile(&FillMode::Sentinel);
        for k in 0..FRAMES {
            for s in 0..SLOTS {
                if !self.mask[k][s] {
                    for f in 0..FEATURES_PER_VEHICLE {
                        let i = flat_index(k, s, f);
                        self.values[i] = fill[i];
                    }
                }
            }
        }
    }
}

pub fn canonical_timestamps(t: f64) -> [f64; FRAMES] {
    [
        t - 3.0 * FRAME_SPACING_S,
        t - 2.0 * FRAME_SPACING_S,
        t - FRAME_SPACING_S,
        t,
    ]
}

/// Value substituted for occluded or absent features.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum FillMode {
    /// Neutral cruise profile derived from the query vehicle: longitudinal speed copied,
    /// zero lateral speed and heading, far-range position in the slot's region, lane
    /// counts set to the road middle.
    #[default]
    Sentinel,
    Zero,
    /// Per-slot feature means (49 values, reused for every frame).
    Mean(Vec<f64>),
}

impl std::str::FromStr for FillMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentinel" => Ok(FillMode::Sentinel),
            "zero" => Ok(FillMode::Zero),
            "mean" => Ok(FillMode::Mean(vec![0.0; FRAME_WIDTH])),
            other => Err(CoreError::Config(format!("unknown fill mode {other:?}"))),
        }
    }
}

/// JSON form of a window (`w.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowFile {
    #[serde(default)]
    pub window_id: Option<String>,
    pub timestamps: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

impl WindowFile {
    pub fn from_window<T: Scalar>(w: &ObservationWindow<T>, id: Option<String>) -> Self {
        Self {
            window_id: id,
            timestamps: w.timestamps.to_vec(),
            frames: (0..FRAMES)
                .map(|k| w.frame(k).iter().map(|v| v.as_f64()).collect())
                .collect(),
            mask: w.mask.iter().map(|m| m.to_vec()).collect(),
        }
    }

    pub fn to_window<T: Scalar>(&self) -> Result<ObservationWindow<T>> {
        if self.timestamps.len() != FRAMES || self.frames.len() != FRAMES || self.mask.len() != FRAMES
        {
            return Err(CoreError::Window(format!(
                "expected {FRAMES} frames, got timestamps={} frames={} mask={}",
                self.timestamps.len(),
                self.frames.len(),
                self.mask.len()
            )));
        }
        let mut values = Vec::with_capacity(WINDOW_LEN);
        let mut mask = [[false; SLOTS]; FRAMES];
        for k in 0..FRAMES {
            if self.frames[k].len() != FRAME_WIDTH {
                return Err(CoreError::Window(format!(
                    "frame {k}: expected {FRAME_WIDTH} values, got {}",
                    self.frames[k].len()
                )));
            }
            if self.mask[k].len() != SLOTS {
                return Err(CoreError::Window(format!(
                    "frame {k}: expected {SLOTS} mask entries"
                )));
            }
            values.extend(self.frames[k].iter().map(|&v| T::lit(v)));
            mask[k].copy_from_slice(&self.mask[k]);
        }
        let mut ts = [0.0; FRAMES];
        ts.copy_from_slice(&self.timestamps);
        ObservationWindow::new(ts, values, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ObservationWindow<f64> {
        let mut v = vec![0.0; WINDOW_LEN];
        for k in 0..FRAMES {
            for s in 0..SLOTS {
                let base = flat_index(k, s, 0);
                v[base..base + 7].copy_from_slice(&[
                    30.0,
                    0.1 * s as f64,
                    0.01,
                    100.0 + 15.0 * k as f64,
                    5.25,
                    1.0,
                    1.0,
                ]);
            }
        }
        ObservationWindow::from_values(v).unwrap()
    }

    #[test]
    fn rejects_wrong_length_and_spacing() {
        assert!(ObservationWindow::<f64>::from_values(vec![0.0; 150]).is_err());
        let w = sample();
        let err = ObservationWindow::new([0.0, 0.5, 1.0, 1.7], w.values().to_vec(), *w.mask());
        assert!(err.is_err());
        let ok = ObservationWindow::new([0.0, 0.52, 1.0, 1.49], w.values().to_vec(), *w.mask());
        assert!(ok.is_ok());
    }

    #[test]
    fn rejects_masked_query_and_negative_lanes() {
        let w = sample();
        let mut mask = *w.mask();
        mask[2][Slot::Query.index()] = false;
        assert!(ObservationWindow::new(*w.timestamps(), w.values().to_vec(), mask).is_err());
        let mut v = w.values().to_vec();
        v[flat_index(1, 3, Feature::LanesRight as usize)] = -1.0;
        assert!(w.with_values(v).is_err());
    }

    #[test]
    fn sentinel_profile_for_query_slot_flattens_lateral_motion() {
        let w = sample();
        let fill = w.fill_profile(&FillMode::Sentinel);
        for k in 0..FRAMES {
            let q = Slot::Query.index();
            assert_eq!(fill[flat_index(k, q, 0)], 30.0);
            assert_eq!(fill[flat_index(k, q, 1)], 0.0);
            assert_eq!(fill[flat_index(k, q, 2)], 0.0);
            assert_eq!(fill[flat_index(k, q, 4)], 5.25);
            let front = flat_index(k, Slot::Front.index(), 3);
            assert_eq!(fill[front], 100.0 + 15.0 * k as f64 + SENTINEL_FAR_RANGE_M);
            let lr = flat_index(k, Slot::LeftRear.index(), 4);
            assert_eq!(fill[lr], 5.25 + SENTINEL_LATERAL_M);
        }
    }

    #[test]
    fn window_file_roundtrip() {
        let w = sample();
        let file = WindowFile::from_window(&w, Some("abc".into()));
        let json = serde_json::to_string(&file).unwrap();
        let back: WindowFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_window::<f64>().unwrap(), w);
    }

    #[test]
    fn three_frame_file_rejected() {
        let w = sample();
        let mut file = WindowFile::from_window(&w, None);
        file.frames.pop();
        file.timestamps.pop();
        file.mask.pop();
        assert!(file.to_window::<f64>().is_err());
    }
}
