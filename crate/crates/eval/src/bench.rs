use std::time::Instant;

use serde::Serialize;
use xlane_core::ig::{integrated_gradients, IgConfig};
use xlane_core::lrp::{explain, LrpConfig};
use xlane_core::lstm::forward;
use xlane_core::{Class, Params, Window};

use crate::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    /// Mean seconds per explained instance, forward pass included.
    pub lrp_mean_s: f64,
    pub ig_mean_s: f64,
    /// `ig_mean_s / lrp_mean_s`
    pub ratio: f64,
    pub n: usize,
    pub ig_steps: usize,
}

/// Time LRP-Ω and IG over the same instances, explaining each instance's label.
/// The first `warmup` instances are run once beforehand and not timed.
pub fn timing_benchmark(
    instances: &[(Window, Class)],
    p: &Params,
    ig_steps: usize,
    warmup: usize,
) -> Result<BenchmarkReport> {
    if instances.is_empty() {
        return Err(EvalError::Config("benchmark needs at least one instance".into()));
    }
    let lrp_cfg = LrpConfig::default();
    let ig_cfg = IgConfig::with_steps(ig_steps);
    ig_cfg.validate()?;
    let lrp = |(w, c): &(Window, Class)| -> Result<f64> {
        let (_, trace) = forward(w, p)?;
        let e = explain(w, p, &trace, *c, &lrp_cfg)?;
        Ok(e.relevance.total())
    };
    let ig = |(w, c): &(Window, Class)| -> Result<f64> { Ok(integrated_gradients(w, p, *c, &ig_cfg)?.total()) };

    let mut sink = 0.0;
    for inst in instances.iter().take(warmup) {
        sink += lrp(inst)? + ig(inst)?;
    }
    let start = Instant::now();
    for inst in instances {
        sink += lrp(inst)?;
    }
    let lrp_total = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for inst in instances {
        sink += ig(inst)?;
    }
    let ig_total = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);

    let n = instances.len();
    let lrp_mean_s = (lrp_total / n as f64).max(f64::MIN_POSITIVE);
    let ig_mean_s = (ig_total / n as f64).max(f64::MIN_POSITIVE);
    Ok(BenchmarkReport {
        lrp_mean_s,
        ig_mean_s,
        ratio: ig_mean_s / lrp_mean_s,
        n,
        ig_steps,
    })
}
