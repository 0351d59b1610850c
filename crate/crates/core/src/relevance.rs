use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::{compensated_parts, compensated_sum, two_sum, Scalar};
use crate::window::{flat_index, Class, Feature, Slot, FRAMES, FRAME_WIDTH, WINDOW_LEN};

/// One attribution value per input entry (4 frames × 49), row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap<T> {
    values: Vec<T>,
}

impl<T: Scalar> RelevanceMap<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() != WINDOW_LEN {
            return Err(CoreError::Shape(format!(
                "relevance map needs {WINDOW_LEN} values, got {}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![T::zero(); WINDOW_LEN],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, frame: usize, slot: Slot, feature: Feature) -> T {
        self.values[flat_index(frame, slot.index(), feature as usize)]
    }

    pub fn frame(&self, k: usize) -> &[T] {
        &self.values[k * FRAME_WIDTH..(k + 1) * FRAME_WIDTH]
    }

    pub fn total(&self) -> T {
        compensated_sum(self.values.iter().copied())
    }
}

/// Relevance absorbed by terms that do not pass it toward the input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SinkLedger<T> {
    /// Site → absorbed relevance.
    pub sinks: BTreeMap<String, T>,
    /// Relevance routed to gate activations, per gate site.
    pub gate_sites: BTreeMap<String, T>,
    /// Relevance injected at the output.
    pub total_in: T,
    /// Relevance that reached the input.
    pub total_out: T,
    /// Rounding error of each entry in `sinks`, kept so totals stay exact.
    low: BTreeMap<String, T>,
}

impl<T: Scalar> SinkLedger<T> {
    pub fn new(total_in: T) -> Self {
        Self {
            sinks: BTreeMap::new(),
            gate_sites: BTreeMap::new(),
            total_in,
            total_out: T::zero(),
            low: BTreeMap::new(),
        }
    }

    pub fn book(&mut self, site: impl Into<String>, value: T) {
        self.book_parts(site.into(), value, T::zero());
    }

    /// Book the exact sum of `terms`.
    pub fn book_terms(&mut self, site: impl Into<String>, terms: impl IntoIterator<Item = T>) {
        let (hi, lo) = compensated_parts(terms);
        let (hi, lo) = two_sum(hi, lo);
        self.book_parts(site.into(), hi, lo);
    }

    /// Book `Σ incoming − Σ outgoing`: the relevance a site did not pass on.
    pub fn book_balance(&mut self, site: impl Into<String>, incoming: &[T], outgoing: &[T]) {
        self.book_terms(site, incoming.iter().copied().chain(outgoing.iter().map(|&v| -v)));
    }

    fn book_parts(&mut self, site: String, hi: T, lo: T) {
        let entry = self.sinks.entry(site.clone()).or_insert_with(T::zero);
        let (s, e) = two_sum(*entry, hi);
        *entry = s;
        *self.low.entry(site).or_insert_with(T::zero) += e + lo;
    }

    pub fn book_gate(&mut self, site: impl Into<String>, relevance: &[T]) {
        let s = compensated_sum(relevance.iter().copied());
        *self.gate_sites.entry(site.into()).or_insert_with(T::zero) += s;
    }

    pub fn sink_total(&self) -> T {
        compensated_sum(self.sink_parts())
    }

    /// Every booked entry together with its rounding error.
    pub fn sink_parts(&self) -> impl Iterator<Item = T> + '_ {
        self.sinks.values().chain(self.low.values()).copied()
    }

    /// `total_in − (total_out + Σ sinks)`; zero up to rounding by construction.
    pub fn imbalance(&self) -> T {
        self.total_in - compensated_sum(self.sink_parts().chain([self.total_out]))
    }
}

/// `relevance.json`
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelevanceFile {
    pub window_id: Option<String>,
    pub class: Class,
    pub method: String,
    /// 4 × 49, row-major by frame.
    pub relevance: Vec<Vec<f64>>,
    pub sinks: BTreeMap<String, f64>,
}

impl RelevanceFile {
    pub fn new<T: Scalar>(
        window_id: Option<String>,
        class: Class,
        method: impl Into<String>,
        map: &RelevanceMap<T>,
        ledger: Option<&SinkLedger<T>>,
    ) -> Self {
        Self {
            window_id,
            class,
            method: method.into(),
            relevance: (0..FRAMES)
                .map(|k| map.frame(k).iter().map(|v| v.as_f64()).collect())
                .collect(),
            sinks: ledger
                .map(|l| l.sinks.iter().map(|(k, v)| (k.clone(), v.as_f64())).collect())
                .unwrap_or_default(),
        }
    }

    pub fn to_map<T: Scalar>(&self) -> Result<RelevanceMap<T>> {
        if self.relevance.len() != FRAMES || self.relevance.iter().any(|r| r.len() != FRAME_WIDTH) {
            return Err(CoreError::Shape("relevance must be 4 × 49".into()));
        }
        RelevanceMap::new(self.relevance.iter().flatten().map(|&v| T::lit(v)).collect())
    }
}
