//! Minimal cross-entropy trainer (Adam, minibatches, global-norm clipping).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grad::backward;
use crate::lstm::{forward_values, InputScaler, LnLstmParams, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::window::{Class, ObservationWindow};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: crate::lstm::DEFAULT_HIDDEN,
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }
}

pub type Sample<T> = (ObservationWindow<T>, Class);

/// Parameters training starts from: seeded init plus an input scaler fitted on `train`.
pub fn initial_params<T: Scalar>(train: &[Sample<T>], cfg: &TrainConfig) -> LnLstmParams<T> {
    let mut p = LnLstmParams::init(cfg.hidden, cfg.seed);
    p.scaler = InputScaler::fit(train.iter().map(|(w, _)| w));
    p
}

pub fn accuracy<T: Scalar>(p: &LnLstmParams<T>, data: &[Sample<T>]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (w, c) in data {
        let (out, _) = forward_values(w.values(), p)?;
        if out.predicted_class == *c {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut LnLstmParams<T>, grads: &LnLstmParams<T>, lr: T) {
        let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for (ti, (p, g)) in params
            .trainable_mut()
            .into_iter()
            .zip(grads.trainable())
            .enumerate()
        {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Train on `train`, reporting validation accuracy after every epoch. Deterministic for a
/// fixed seed.
pub fn train<T: Scalar>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<(LnLstmParams<T>, TrainReport)> {
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(CoreError::Config("batch size and hidden width must be >= 1".into()));
    }
    let mut params = initial_params(train, cfg);
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || train.is_empty() {
        return Ok((params, report));
    }
    let shapes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = T::lit(cfg.learning_rate);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (w, c) = &train[i];
                let (out, trace) = forward_values(w.values(), &params)?;
                let p_c = out.probabilities[c.index()];
                batch_loss -= p_c.max(T::lit(1e-300)).ln().as_f64();
                if out.predicted_class == *c {
                    correct += 1;
                }
                let mut d = [T::zero(); NUM_CLASSES];
                for k in 0..NUM_CLASSES {
                    let target = if k == c.index() { T::one() } else { T::zero() };
                    d[k] = (out.probabilities[k] - target) / T::lit(batch.len() as f64);
                }
                backward(&params, &trace, &d, Some(&mut grads))?;
            }
            if !batch_loss.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            clip(&mut grads, cfg.clip_norm);
            adam.step(&mut params, &grads, lr);
        }
        params.validate().map_err(|_| CoreError::Diverged {
            epoch,
            batch: usize::MAX,
            loss: f64::NAN,
        })?;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy: accuracy(&params, val)?,
        };
        log::info!(
            "epoch {:>3}: loss {:.4} train acc {:.3} val acc {:.3}",
            stats.epoch,
            stats.loss,
            stats.train_accuracy,
            stats.val_accuracy
        );
        report.epochs.push(stats);
    }
    Ok((params, report))
}

fn clip<T: Scalar>(grads: &mut LnLstmParams<T>, max_norm: f64) {
    if !(max_norm > 0.0) {
        return;
    }
    let norm = grads
        .trainable()
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for t in grads.trainable_mut() {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }
}
