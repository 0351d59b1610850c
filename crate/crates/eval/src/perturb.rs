use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use xlane_core::explanation::{explain_super_features, SUPER_FEATURE_COUNT};
use xlane_core::ig::{integrated_gradients, IgConfig};
use xlane_core::lrp::{explain, LrpConfig, OmegaVariant};
use xlane_core::lstm::forward;
use xlane_core::window::{flat_index, FillMode, FRAMES};
use xlane_core::{Class, Params, Slot, SuperFeature, Window};

use crate::{EvalError, Result};

/// Super-feature `i` in canonical order: vehicle `i / 2`, movement for even `i`.
pub fn super_feature_at(i: usize) -> (Slot, SuperFeature) {
    let slot = Slot::from_index(i / 2).expect("index below 14");
    let sf = if i % 2 == 0 {
        SuperFeature::Movement
    } else {
        SuperFeature::Position
    };
    (slot, sf)
}

/// Replace the features of one super-feature in all four frames with `fill`
/// (a full 196-value fill profile).
pub fn occlude(window: &Window, slot: Slot, sf: SuperFeature, fill: &[f64]) -> Result<Window> {
    let mut v = window.values().to_vec();
    for k in 0..FRAMES {
        for &f in sf.features() {
            let i = flat_index(k, slot.index(), f as usize);
            v[i] = fill[i];
        }
    }
    Ok(window.with_values(v)?)
}

/// Scores the 14 super-features of a window; higher means occluded earlier.
pub trait Attribution: Sync {
    fn name(&self) -> String;
    fn scores(&self, p: &Params, w: &Window, class: Class, rng: &mut ChaCha8Rng) -> Result<[f64; SUPER_FEATURE_COUNT]>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    LrpOmega,
    LrpOmegaFull,
    LrpIdentity,
    Ig { steps: usize },
    Random,
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lrp-omega" | "lrp" => Ok(Method::LrpOmega),
            "lrp-omega-full" => Ok(Method::LrpOmegaFull),
            "lrp-identity" => Ok(Method::LrpIdentity),
            "ig" => Ok(Method::Ig {
                steps: xlane_core::ig::DEFAULT_STEPS,
            }),
            "random" => Ok(Method::Random),
            other => Err(EvalError::Config(format!("unknown method {other:?}"))),
        }
    }
}

fn super_scores(r: &xlane_core::Relevance) -> [f64; SUPER_FEATURE_COUNT] {
    let e = explain_super_features(r);
    let mut out = [0.0; SUPER_FEATURE_COUNT];
    for (i, (_, _, v)) in e.entries().into_iter().enumerate() {
        out[i] = v;
    }
    out
}

impl Attribution for Method {
    fn name(&self) -> String {
        match self {
            Method::LrpOmega => "lrp-omega".into(),
            Method::LrpOmegaFull => "lrp-omega-full".into(),
            Method::LrpIdentity => "lrp-identity".into(),
            Method::Ig { .. } => "ig".into(),
            Method::Random => "random".into(),
        }
    }

    fn scores(&self, p: &Params, w: &Window, class: Class, rng: &mut ChaCha8Rng) -> Result<[f64; SUPER_FEATURE_COUNT]> {
        match *self {
            Method::LrpOmega | Method::LrpOmegaFull | Method::LrpIdentity => {
                let cfg = match self {
                    Method::LrpOmega => LrpConfig::default(),
                    Method::LrpOmegaFull => LrpConfig {
                        omega_variant: OmegaVariant::FullDecomposition,
                        ..LrpConfig::default()
                    },
                    _ => LrpConfig::identity(),
                };
                let (_, trace) = forward(w, p)?;
                Ok(super_scores(&explain(w, p, &trace, class, &cfg)?.relevance))
            }
            Method::Ig { steps } => {
                let r = integrated_gradients(w, p, class, &IgConfig::with_steps(steps))?;
                Ok(super_scores(&r))
            }
            Method::Random => Ok(std::array::from_fn(|_| rng.gen())),
        }
    }
}

/// How the next super-feature is chosen from attribution scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ranking {
    /// Most positive relevance for the explained class first.
    #[default]
    Signed,
    /// Largest |relevance| first.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    pub fill: FillMode,
    /// Recompute attributions on the perturbed window after every step; otherwise rank
    /// once on the original window.
    pub recompute: bool,
    pub ranking: Ranking,
    pub seed: u64,
    /// Use at most this many instances (in dataset order) before filtering.
    pub max_instances: Option<usize>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            fill: FillMode::Sentinel,
            recompute: true,
            ranking: Ranking::Signed,
            seed: 0,
            max_instances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationCurve {
    pub method: String,
    /// Step 0 (unperturbed) through step 14.
    pub accuracy: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    /// Per instance, per step: still classified as the original label.
    #[serde(skip)]
    pub outcomes: Vec<[bool; SUPER_FEATURE_COUNT + 1]>,
}

impl PerturbationCurve {
    /// Mean accuracy over steps `from..=to`.
    pub fn mean_over(&self, from: usize, to: usize) -> f64 {
        let s = &self.accuracy[from..=to];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Percentile bootstrap interval for the accuracy at `step`.
    pub fn bootstrap_ci(&self, step: usize, iters: usize, level: f64, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.outcomes.len();
        let mut stats: Vec<f64> = (0..iters)
            .map(|_| {
                let hits = (0..n).filter(|_| self.outcomes[rng.gen_range(0..n)][step]).count();
                hits as f64 / n as f64
            })
            .collect();
        stats.sort_by(f64::total_cmp);
        let lo = ((1.0 - level) / 2.0 * iters as f64) as usize;
        let hi = (((1.0 + level) / 2.0 * iters as f64) as usize).min(iters - 1);
        (stats[lo], stats[hi])
    }
}

fn pick(scores: &[f64; SUPER_FEATURE_COUNT], remaining: &[bool; SUPER_FEATURE_COUNT], ranking: Ranking) -> usize {
    let key = |i: usize| match ranking {
        Ranking::Signed => scores[i],
        Ranking::Magnitude => scores[i].abs(),
    };
    let mut best: Option<usize> = None;
    for i in (0..SUPER_FEATURE_COUNT).filter(|&i| remaining[i]) {
        // strict comparison keeps the canonical order on ties; NaN scores never win
        if best.map_or(true, |b| key(i) > key(b) || key(b).is_nan()) {
            best = Some(i);
        }
    }
    best.expect("a super-feature remains")
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn perturb_one(
    p: &Params,
    window: &Window,
    label: Class,
    method: &dyn Attribution,
    cfg: &PerturbConfig,
    index: usize,
) -> Result<[bool; SUPER_FEATURE_COUNT + 1]> {
    let mut rng = instance_rng(cfg.seed, index);
    let fill = window.fill_profile(&cfg.fill);
    let mut remaining = [true; SUPER_FEATURE_COUNT];
    let mut current = window.clone();
    let mut out = [false; SUPER_FEATURE_COUNT + 1];
    out[0] = true;
    let mut scores = if cfg.recompute {
        None
    } else {
        Some(method.scores(p, window, label, &mut rng)?)
    };
    for step in 1..=SUPER_FEATURE_COUNT {
        let s = match &scores {
            Some(s) => *s,
            None => method.scores(p, &current, label, &mut rng)?,
        };
        let i = pick(&s, &remaining, cfg.ranking);
        remaining[i] = false;
        if !cfg.recompute {
            scores = Some(s);
        }
        let (slot, sf) = super_feature_at(i);
        current = occlude(&current, slot, sf, &fill)?;
        out[step] = forward(&current, p)?.0.predicted_class == label;
    }
    Ok(out)
}

/// Occlude the remaining most relevant super-feature step by step and record the share
/// of initially correct instances that keep their label.
pub fn perturbation_test(
    instances: &[(Window, Class)],
    p: &Params,
    method: &dyn Attribution,
    cfg: &PerturbConfig,
) -> Result<PerturbationCurve> {
    let limit = cfg.max_instances.unwrap_or(instances.len()).min(instances.len());
    let pool = &instances[..limit];
    let correct: Vec<usize> = pool
        .par_iter()
        .enumerate()
        .map(|(i, (w, c))| Ok((forward(w, p)?.0.predicted_class == *c).then_some(i)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if correct.is_empty() {
        return Err(EvalError::EmptyCorrectSet);
    }
    let outcomes = correct
        .par_iter()
        .map(|&i| perturb_one(p, &pool[i].0, pool[i].1, method, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len();
    let accuracy = (0..=SUPER_FEATURE_COUNT)
        .map(|s| outcomes.iter().filter(|o| o[s]).count() as f64 / n as f64)
        .collect();
    Ok(PerturbationCurve {
        method: method.name(),
        accuracy,
        n,
        seed: cfg.seed,
        outcomes,
    })
}

/// Uniformly random occlusion order per instance.
pub fn random_occlusion(instances: &[(Window, Class)], p: &Params, cfg: &PerturbConfig) -> Result<PerturbationCurve> {
    perturbation_test(instances, p, &Method::Random, cfg)
}

/// `method,step,accuracy,n`
pub fn write_curves_csv<W: Write>(curves: &[PerturbationCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "step", "accuracy", "n"])?;
    for c in curves {
        for (step, acc) in c.accuracy.iter().enumerate() {
            w.write_record([c.method.clone(), step.to_string(), format!("{acc:.6}"), c.n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order() {
        assert_eq!(super_feature_at(0), (Slot::LeftFront, SuperFeature::Movement));
        assert_eq!(super_feature_at(13), (Slot::Query, SuperFeature::Position));
    }

    #[test]
    fn pick_respects_ranking_and_ties() {
        let mut s = [0.0; 14];
        s[3] = -5.0;
        s[7] = 2.0;
        let all = [true; 14];
        assert_eq!(pick(&s, &all, Ranking::Signed), 7);
        assert_eq!(pick(&s, &all, Ranking::Magnitude), 3);
        let mut rem = all;
        rem[7] = false;
        assert_eq!(pick(&s, &rem, Ranking::Signed), 0);
        assert_eq!(pick(&[1.0; 14], &all, Ranking::Signed), 0);
    }

    #[test]
    fn method_names_parse() {
        for m in ["lrp-omega", "lrp-omega-full", "lrp-identity", "ig", "random"] {
            assert_eq!(m.parse::<Method>().unwrap().name(), m);
        }
        assert!("shap".parse::<Method>().is_err());
    }
}
