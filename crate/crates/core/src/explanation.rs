//! Collapse per-input relevance into per-vehicle movement/position super-features.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::relevance::RelevanceMap;
use crate::scalar::Scalar;
use crate::window::{Feature, Slot, SuperFeature, FEATURES_PER_VEHICLE, FRAMES, FRAME_WIDTH, SLOTS};

pub const TOP_K: usize = 3;
pub const SUPER_FEATURE_COUNT: usize = 2 * SLOTS;

/// How super-features combine their raw feature relevances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Movement = mean of 3, position = mean of 4.
    #[default]
    Mean,
    /// Plain sums; preserves the total.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedSuperFeature<T> {
    pub slot: Slot,
    pub super_feature: SuperFeature,
    pub relevance: T,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperFeatureExplanation<T> {
    pub movement: [T; SLOTS],
    pub position: [T; SLOTS],
    pub ranked_top3: Vec<RankedSuperFeature<T>>,
}

impl<T: Scalar> SuperFeatureExplanation<T> {
    pub fn value(&self, slot: Slot, sf: SuperFeature) -> T {
        match sf {
            SuperFeature::Movement => self.movement[slot.index()],
            SuperFeature::Position => self.position[slot.index()],
        }
    }

    /// All 14 super-features in canonical order (vehicle index, movement before position).
    pub fn entries(&self) -> Vec<(Slot, SuperFeature, T)> {
        Slot::ALL
            .iter()
            .flat_map(|&s| {
                [
                    (s, SuperFeature::Movement, self.movement[s.index()]),
                    (s, SuperFeature::Position, self.position[s.index()]),
                ]
            })
            .collect()
    }
}

/// Column sums over the four frames.
pub fn aggregate_time<T: Scalar>(r: &RelevanceMap<T>) -> Vec<T> {
    let mut out = vec![T::zero(); FRAME_WIDTH];
    for k in 0..FRAMES {
        for (o, &v) in out.iter_mut().zip(r.frame(k)) {
            *o += v;
        }
    }
    out
}

pub fn aggregate_super<T: Scalar>(r49: &[T], weighting: Weighting) -> SuperFeatureExplanation<T> {
    assert_eq!(r49.len(), FRAME_WIDTH, "aggregate_super expects one frame of relevance");
    let mut movement = [T::zero(); SLOTS];
    let mut position = [T::zero(); SLOTS];
    for s in 0..SLOTS {
        let v = &r49[s * FEATURES_PER_VEHICLE..(s + 1) * FEATURES_PER_VEHICLE];
        let sum_of = |sf: SuperFeature| sf.features().iter().map(|&f| v[f as usize]).sum::<T>();
        let m = sum_of(SuperFeature::Movement);
        let p = sum_of(SuperFeature::Position);
        (movement[s], position[s]) = match weighting {
            Weighting::Mean => (m / T::lit(3.0), p / T::lit(4.0)),
            Weighting::Sum => (m, p),
        };
    }
    let mut expl = SuperFeatureExplanation {
        movement,
        position,
        ranked_top3: Vec::new(),
    };
    expl.ranked_top3 = top_k(&expl, TOP_K);
    expl
}

/// Time aggregation followed by the default (mean) super-feature weighting.
pub fn explain_super_features<T: Scalar>(r: &RelevanceMap<T>) -> SuperFeatureExplanation<T> {
    aggregate_super(&aggregate_time(r), Weighting::Mean)
}

/// Order by `|relevance|` descending; ties by vehicle index, movement before position.
pub fn rank_by_magnitude<T: Scalar>(entries: &mut [(Slot, SuperFeature, T)]) {
    entries.sort_by(|a, b| {
        b.2.abs()
            .partial_cmp(&a.2.abs())
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
}

pub fn top_k<T: Scalar>(expl: &SuperFeatureExplanation<T>, k: usize) -> Vec<RankedSuperFeature<T>> {
    let k = if k > SUPER_FEATURE_COUNT {
        log::warn!("top_k: k = {k} exceeds {SUPER_FEATURE_COUNT} super-features, clamping");
        SUPER_FEATURE_COUNT
    } else {
        k
    };
    let mut entries = expl.entries();
    rank_by_magnitude(&mut entries);
    entries.truncate(k);
    let mags: Vec<f64> = entries.iter().map(|e| e.2.abs().as_f64()).collect();
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    entries
        .into_iter()
        .zip(mags)
        .map(|((slot, sf, rel), m)| RankedSuperFeature {
            slot,
            super_feature: sf,
            relevance: rel,
            bucket: bucket_of(m, lo, hi),
        })
        .collect()
}

/// Thirds of the observed `[lo, hi]` magnitude range.
fn bucket_of(m: f64, lo: f64, hi: f64) -> Bucket {
    let span = hi - lo;
    if !(span > 0.0) {
        return Bucket::High;
    }
    let u = (m - lo) / span;
    if u >= 2.0 / 3.0 {
        Bucket::High
    } else if u >= 1.0 / 3.0 {
        Bucket::Medium
    } else {
        Bucket::Low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperFeatureValues {
    pub movement: f64,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub vehicle_slot: Slot,
    pub super_feature: SuperFeature,
    pub relevance: f64,
    pub bucket: Bucket,
}

impl<T: Scalar> From<&RankedSuperFeature<T>> for TopEntry {
    fn from(r: &RankedSuperFeature<T>) -> Self {
        Self {
            vehicle_slot: r.slot,
            super_feature: r.super_feature,
            relevance: r.relevance.as_f64(),
            bucket: r.bucket,
        }
    }
}

/// `explanation.json`: vehicle key → super-features, plus the ranked top 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationFile {
    pub vehicles: std::collections::BTreeMap<String, SuperFeatureValues>,
    pub top3: Vec<TopEntry>,
}

impl ExplanationFile {
    /// `key` names each slot (vehicle uuid in the live service, slot name offline).
    pub fn new<T: Scalar>(
        expl: &SuperFeatureExplanation<T>,
        mut key: impl FnMut(Slot) -> Option<String>,
    ) -> Self {
        let vehicles = Slot::ALL
            .iter()
            .filter_map(|&s| {
                key(s).map(|k| {
                    (
                        k,
                        SuperFeatureValues {
                            movement: expl.movement[s.index()].as_f64(),
                            position: expl.position[s.index()].as_f64(),
                        },
                    )
                })
            })
            .collect();
        Self {
            vehicles,
            top3: expl.ranked_top3.iter().map(TopEntry::from).collect(),
        }
    }
}

/// Feature→super-feature mapping check used by callers that build maps by hand.
pub fn feature_of(index_in_frame: usize) -> (Slot, Feature) {
    (
        Slot::from_index(index_in_frame / FEATURES_PER_VEHICLE).expect("index within frame"),
        Feature::ALL[index_in_frame % FEATURES_PER_VEHICLE],
    )
}
