//! Integrated Gradients along the straight line from a baseline to the input.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grad::backward;
use crate::lstm::{forward_values, LnLstmParams, NUM_CLASSES};
use crate::relevance::RelevanceMap;
use crate::scalar::{all_finite, Scalar};
use crate::window::{Class, FillMode, ObservationWindow};

pub const DEFAULT_STEPS: usize = 50;

/// A scalar score over a flat input with an exact gradient.
pub trait Differentiable<T: Scalar> {
    fn score(&self, x: &[T], class: usize) -> Result<T>;
    fn score_gradient(&self, x: &[T], class: usize) -> Result<Vec<T>>;
}

impl<T: Scalar> Differentiable<T> for LnLstmParams<T> {
    fn score(&self, x: &[T], class: usize) -> Result<T> {
        let (out, _) = forward_values(x, self)?;
        Ok(out.logits[class])
    }

    fn score_gradient(&self, x: &[T], class: usize) -> Result<Vec<T>> {
        let (_, trace) = forward_values(x, self)?;
        let mut d = [T::zero(); NUM_CLASSES];
        d[class] = T::one();
        backward(self, &trace, &d, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Every super-feature replaced by the sentinel fill ("absent traffic").
    #[default]
    SentinelWindow,
    ZeroWindow,
}

impl std::str::FromStr for Baseline {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentinel" | "sentinel-window" => Ok(Baseline::SentinelWindow),
            "zero" | "zero-window" => Ok(Baseline::ZeroWindow),
            other => Err(CoreError::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
    pub baseline: Baseline,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            baseline: Baseline::SentinelWindow,
        }
    }
}

impl IgConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("integrated gradients needs steps >= 1".into()));
        }
        Ok(())
    }
}

/// `(x − x′) ⊙ mean_m ∇f(x′ + α_m (x − x′))` with midpoints `α_m = (m − ½)/steps`.
pub fn integrate<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: &[T],
    baseline: &[T],
    class: usize,
    steps: usize,
) -> Result<Vec<T>> {
    if steps == 0 {
        return Err(CoreError::Config("integrated gradients needs steps >= 1".into()));
    }
    if x.len() != baseline.len() {
        return Err(CoreError::Shape("input and baseline lengths differ".into()));
    }
    let delta: Vec<T> = x.iter().zip(baseline).map(|(&a, &b)| a - b).collect();
    let mut acc = vec![T::zero(); x.len()];
    let n = T::lit(steps as f64);
    let mut point = vec![T::zero(); x.len()];
    for m in 0..steps {
        let alpha = (T::lit(m as f64) + T::lit(0.5)) / n;
        for i in 0..x.len() {
            point[i] = baseline[i] + alpha * delta[i];
        }
        let g = model.score_gradient(&point, class)?;
        if !all_finite(&g) {
            return Err(CoreError::NonFinite(format!("gradient at path step {m}")));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok(acc
        .into_iter()
        .zip(&delta)
        .map(|(g, &d)| g / n * d)
        .collect())
}

pub fn baseline_values<T: Scalar>(w: &ObservationWindow<T>, baseline: Baseline) -> Vec<T> {
    match baseline {
        Baseline::SentinelWindow => w.fill_profile(&FillMode::Sentinel),
        Baseline::ZeroWindow => w.fill_profile(&FillMode::Zero),
    }
}

pub fn integrated_gradients<T: Scalar>(
    w: &ObservationWindow<T>,
    p: &LnLstmParams<T>,
    class: Class,
    cfg: &IgConfig,
) -> Result<RelevanceMap<T>> {
    cfg.validate()?;
    w.validate()?;
    let base = baseline_values(w, cfg.baseline);
    let attr = integrate(p, w.values(), &base, class.index(), cfg.steps)?;
    RelevanceMap::new(attr)
}

/// `|Σ attributions − (f_c(x) − f_c(x′))|`
pub fn completeness_gap<T: Scalar>(
    w: &ObservationWindow<T>,
    p: &LnLstmParams<T>,
    class: Class,
    cfg: &IgConfig,
) -> Result<T> {
    let attr = integrated_gradients(w, p, class, cfg)?;
    let base = baseline_values(w, cfg.baseline);
    let fx = p.score(w.values(), class.index())?;
    let fb = p.score(&base, class.index())?;
    Ok((attr.total() - (fx - fb)).abs())
}
