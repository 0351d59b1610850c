//! Layer-normalized LSTM with a dense classification head.
//!
//! One step computes
//!
//! ```text
//! pre = LN_in(W x) + LN_rec(U h_prev) + bias          gates laid out [i, f, o, g]
//! c   = σ(f) ⊙ c_prev + σ(i) ⊙ tanh(g)
//! h   = σ(o) ⊙ tanh(LN_cell(c))
//! ```
//!
//! and the head maps the final `h` to three logits (left, keep, right).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::layer_norm::{LayerNormParams, LnStats};
use crate::scalar::{all_finite, sigmoid, Scalar};
use crate::tensor::Matrix;
use crate::window::{Class, ObservationWindow, FRAMES, FRAME_WIDTH, HORIZON_S};

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

/// Fixed per-column affine map applied to every frame before the input projection.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> InputScaler<T> {
    pub fn identity() -> Self {
        Self {
            mean: vec![T::zero(); FRAME_WIDTH],
            scale: vec![T::one(); FRAME_WIDTH],
        }
    }

    /// Column mean and standard deviation over all frames of `windows`.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a ObservationWindow<T>>) -> Self {
        let mut sum = vec![0.0f64; FRAME_WIDTH];
        let mut sq = vec![0.0f64; FRAME_WIDTH];
        let mut n = 0usize;
        for w in windows {
            for k in 0..FRAMES {
                for (i, v) in w.frame(k).iter().enumerate() {
                    let v = v.as_f64();
                    sum[i] += v;
                    sq[i] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / nf - m * m).max(0.0).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect::<Vec<_>>();
        Self {
            mean: mean.into_iter().map(T::lit).collect(),
            scale: scale.into_iter().map(T::lit).collect(),
        }
    }

    pub fn apply(&self, frame: &[T]) -> Vec<T> {
        frame
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&x, &m), &s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnLstmParams<T> {
    pub hidden: usize,
    pub scaler: InputScaler<T>,
    /// `4H × 49`
    pub w_input: Matrix<T>,
    /// `4H × H`
    pub w_recurrent: Matrix<T>,
    pub gate_bias: Vec<T>,
    /// `None` turns the site into a pass-through.
    pub ln_input: Option<LayerNormParams<T>>,
    pub ln_recurrent: Option<LayerNormParams<T>>,
    pub ln_cell: Option<LayerNormParams<T>>,
    /// `3 × H`
    pub head_weight: Matrix<T>,
    pub head_bias: Vec<T>,
}

impl<T: Scalar> LnLstmParams<T> {
    /// All weights and biases zero, unit layer-norm gains.
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            scaler: InputScaler::identity(),
            w_input: Matrix::zeros(4 * hidden, FRAME_WIDTH),
            w_recurrent: Matrix::zeros(4 * hidden, hidden),
            gate_bias: vec![T::zero(); 4 * hidden],
            ln_input: Some(LayerNormParams::identity(4 * hidden)),
            ln_recurrent: Some(LayerNormParams::identity(4 * hidden)),
            ln_cell: Some(LayerNormParams::identity(hidden)),
            head_weight: Matrix::zeros(NUM_CLASSES, hidden),
            head_bias: vec![T::zero(); NUM_CLASSES],
        }
    }

    /// Glorot-uniform weights, forget-gate bias 1, unit gains.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(hidden);
        let glorot = |rng: &mut ChaCha8Rng, m: &mut Matrix<T>| {
            let limit = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = T::lit(rng.gen_range(-limit..limit));
            }
        };
        glorot(&mut rng, &mut p.w_input);
        glorot(&mut rng, &mut p.w_recurrent);
        glorot(&mut rng, &mut p.head_weight);
        for b in &mut p.gate_bias[hidden..2 * hidden] {
            *b = T::one();
        }
        p
    }

    /// Random parameters with every value drawn non-trivially, for testing rule
    /// implementations away from the symmetric zero point.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::init(hidden, seed ^ 0x9e37_79b9);
        let mut jitter = |v: &mut T, lo: f64, hi: f64| *v = T::lit(rng.gen_range(lo..hi));
        for b in &mut p.gate_bias {
            jitter(b, -0.5, 0.5);
        }
        for b in &mut p.head_bias {
            jitter(b, -0.5, 0.5);
        }
        for ln in [&mut p.ln_input, &mut p.ln_recurrent, &mut p.ln_cell]
            .into_iter()
            .flatten()
        {
            for g in &mut ln.gain {
                jitter(g, 0.5, 1.5);
            }
            for b in &mut ln.bias {
                jitter(b, -0.3, 0.3);
            }
        }
        for w in p.head_weight.as_mut_slice() {
            jitter(w, -1.0, 1.0);
        }
        p
    }

    /// Same architecture without any layer normalization.
    pub fn without_layer_norm(mut self) -> Self {
        self.ln_input = None;
        self.ln_recurrent = None;
        self.ln_cell = None;
        self
    }

    /// Zero-valued tensors with the same shapes; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let zero_ln = |ln: &Option<LayerNormParams<T>>| {
            ln.as_ref().map(|l| LayerNormParams {
                gain: vec![T::zero(); l.width()],
                bias: vec![T::zero(); l.width()],
                var_eps: l.var_eps,
            })
        };
        Self {
            hidden: self.hidden,
            scaler: self.scaler.clone(),
            w_input: Matrix::zeros(self.w_input.rows(), self.w_input.cols()),
            w_recurrent: Matrix::zeros(self.w_recurrent.rows(), self.w_recurrent.cols()),
            gate_bias: vec![T::zero(); self.gate_bias.len()],
            ln_input: zero_ln(&self.ln_input),
            ln_recurrent: zero_ln(&self.ln_recurrent),
            ln_cell: zero_ln(&self.ln_cell),
            head_weight: Matrix::zeros(self.head_weight.rows(), self.head_weight.cols()),
            head_bias: vec![T::zero(); self.head_bias.len()],
        }
    }

    /// Every trainable tensor, in a fixed order. The scaler is not trainable.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.w_input.as_mut_slice(),
            self.w_recurrent.as_mut_slice(),
            &mut self.gate_bias,
        ];
        for ln in [&mut self.ln_input, &mut self.ln_recurrent, &mut self.ln_cell]
            .into_iter()
            .flatten()
        {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out.push(self.head_weight.as_mut_slice());
        out.push(&mut self.head_bias);
        out
    }

    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            self.w_input.as_slice(),
            self.w_recurrent.as_slice(),
            &self.gate_bias,
        ];
        for ln in [&self.ln_input, &self.ln_recurrent, &self.ln_cell]
            .into_iter()
            .flatten()
        {
            out.push(&ln.gain);
            out.push(&ln.bias);
        }
        out.push(self.head_weight.as_slice());
        out.push(&self.head_bias);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        let shape_err = |what: &str| Err(CoreError::Shape(format!("{what} inconsistent with hidden width {h}")));
        if h == 0 {
            return Err(CoreError::Shape("hidden width must be >= 1".into()));
        }
        if self.w_input.rows() != 4 * h || self.w_input.cols() != FRAME_WIDTH {
            return shape_err("input weights");
        }
        if self.w_recurrent.rows() != 4 * h || self.w_recurrent.cols() != h {
            return shape_err("recurrent weights");
        }
        if self.gate_bias.len() != 4 * h {
            return shape_err("gate bias");
        }
        if self.head_weight.rows() != NUM_CLASSES
            || self.head_weight.cols() != h
            || self.head_bias.len() != NUM_CLASSES
        {
            return shape_err("head");
        }
        if self.scaler.mean.len() != FRAME_WIDTH || self.scaler.scale.len() != FRAME_WIDTH {
            return shape_err("input scaler");
        }
        if self.scaler.scale.iter().any(|s| *s == T::zero()) {
            return Err(CoreError::Config("input scaler has zero scale".into()));
        }
        for (ln, width, name) in [
            (&self.ln_input, 4 * h, "input layer norm"),
            (&self.ln_recurrent, 4 * h, "recurrent layer norm"),
            (&self.ln_cell, h, "cell layer norm"),
        ] {
            if let Some(ln) = ln {
                ln.validate()?;
                if ln.width() != width {
                    return shape_err(name);
                }
            }
        }
        if !self.trainable().iter().all(|t| all_finite(t)) {
            return Err(CoreError::NonFinite("parameters".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

/// Every intermediate of one recurrent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<T> {
    /// Standardized input frame.
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// `W x`
    pub proj_input: Vec<T>,
    /// `U h_prev`
    pub proj_recurrent: Vec<T>,
    pub ln_input_out: Vec<T>,
    pub ln_input_stats: Option<LnStats<T>>,
    pub ln_recurrent_out: Vec<T>,
    pub ln_recurrent_stats: Option<LnStats<T>>,
    /// Gate pre-activations `[i, f, o, g]`.
    pub preact: Vec<T>,
    pub input_gate: Vec<T>,
    pub forget_gate: Vec<T>,
    pub output_gate: Vec<T>,
    pub candidate: Vec<T>,
    pub c: Vec<T>,
    pub ln_cell_out: Vec<T>,
    pub ln_cell_stats: Option<LnStats<T>>,
    pub cell_tanh: Vec<T>,
    pub h: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    pub hidden: usize,
    pub steps: Vec<StepTrace<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    /// Recompute the logits from the traced final hidden state.
    pub fn replay_logits(&self, p: &LnLstmParams<T>) -> Vec<T> {
        let h = &self.steps.last().expect("non-empty trace").h;
        head_logits(p, h)
    }

    pub fn check_against(&self, p: &LnLstmParams<T>) -> Result<()> {
        if self.hidden != p.hidden {
            return Err(CoreError::TraceMismatch(format!(
                "trace hidden width {} vs params {}",
                self.hidden, p.hidden
            )));
        }
        if self.steps.len() != FRAMES {
            return Err(CoreError::TraceMismatch(format!(
                "trace has {} steps",
                self.steps.len()
            )));
        }
        if self.logits.len() != NUM_CLASSES {
            return Err(CoreError::TraceMismatch("trace logits".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput<T> {
    pub logits: [T; NUM_CLASSES],
    pub probabilities: [T; NUM_CLASSES],
    pub predicted_class: Class,
    pub horizon_s: f64,
}

impl<T: Scalar> PredictionOutput<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        let mut l = [T::zero(); NUM_CLASSES];
        l.copy_from_slice(logits);
        let probabilities = softmax(&l);
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if l[c] > l[best] {
                best = c;
            }
        }
        Self {
            logits: l,
            probabilities,
            predicted_class: Class::from_index(best).expect("class index"),
            horizon_s: HORIZON_S,
        }
    }

    pub fn logit(&self, c: Class) -> T {
        self.logits[c.index()]
    }
}

pub fn softmax<T: Scalar>(l: &[T; NUM_CLASSES]) -> [T; NUM_CLASSES] {
    let m = l.iter().copied().fold(T::neg_infinity(), T::max);
    let e = l.map(|v| (v - m).exp());
    let s = e.iter().copied().sum::<T>();
    e.map(|v| v / s)
}

fn head_logits<T: Scalar>(p: &LnLstmParams<T>, h: &[T]) -> Vec<T> {
    p.head_weight
        .matvec(h)
        .into_iter()
        .zip(&p.head_bias)
        .map(|(z, &b)| z + b)
        .collect()
}

fn check<T: Scalar>(site: &str, k: usize, v: &[T]) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!("step {k}: {site}")))
    }
}

fn apply_ln<T: Scalar>(
    ln: &Option<LayerNormParams<T>>,
    a: &[T],
) -> Result<(Vec<T>, Option<LnStats<T>>)> {
    match ln {
        Some(ln) => {
            let (y, st) = ln.forward(a)?;
            Ok((y, Some(st)))
        }
        None => Ok((a.to_vec(), None)),
    }
}

/// One recurrent step on a raw (unscaled) 49-feature frame.
pub fn lstm_step<T: Scalar>(
    frame: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LnLstmParams<T>,
) -> Result<(Vec<T>, Vec<T>, StepTrace<T>)> {
    lstm_step_at(0, frame, h_prev, c_prev, p)
}

fn lstm_step_at<T: Scalar>(
    k: usize,
    frame: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LnLstmParams<T>,
) -> Result<(Vec<T>, Vec<T>, StepTrace<T>)> {
    let hd = p.hidden;
    if frame.len() != FRAME_WIDTH || h_prev.len() != hd || c_prev.len() != hd {
        return Err(CoreError::Shape(format!(
            "step input {} / state {},{} for hidden width {hd}",
            frame.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let x = p.scaler.apply(frame);
    let proj_input = p.w_input.matvec(&x);
    check("input projection", k, &proj_input)?;
    let proj_recurrent = p.w_recurrent.matvec(h_prev);
    check("recurrent projection", k, &proj_recurrent)?;
    let (ln_input_out, ln_input_stats) = apply_ln(&p.ln_input, &proj_input)?;
    check("input layer norm", k, &ln_input_out)?;
    let (ln_recurrent_out, ln_recurrent_stats) = apply_ln(&p.ln_recurrent, &proj_recurrent)?;
    check("recurrent layer norm", k, &ln_recurrent_out)?;
    let preact: Vec<T> = (0..4 * hd)
        .map(|j| ln_input_out[j] + ln_recurrent_out[j] + p.gate_bias[j])
        .collect();
    check("gate pre-activation", k, &preact)?;

    let input_gate: Vec<T> = preact[0..hd].iter().map(|&v| sigmoid(v)).collect();
    let forget_gate: Vec<T> = preact[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let output_gate: Vec<T> = preact[2 * hd..3 * hd].iter().map(|&v| sigmoid(v)).collect();
    let candidate: Vec<T> = preact[3 * hd..4 * hd].iter().map(|&v| v.tanh()).collect();
    let c: Vec<T> = (0..hd)
        .map(|u| forget_gate[u] * c_prev[u] + input_gate[u] * candidate[u])
        .collect();
    check("cell state", k, &c)?;
    let (ln_cell_out, ln_cell_stats) = apply_ln(&p.ln_cell, &c)?;
    check("cell layer norm", k, &ln_cell_out)?;
    let cell_tanh: Vec<T> = ln_cell_out.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = output_gate
        .iter()
        .zip(&cell_tanh)
        .map(|(&o, &t)| o * t)
        .collect();
    check("hidden state", k, &h)?;

    let trace = StepTrace {
        x,
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        proj_input,
        proj_recurrent,
        ln_input_out,
        ln_input_stats,
        ln_recurrent_out,
        ln_recurrent_stats,
        preact,
        input_gate,
        forget_gate,
        output_gate,
        candidate,
        c: c.clone(),
        ln_cell_out,
        ln_cell_stats,
        cell_tanh,
        h: h.clone(),
    };
    Ok((h, c, trace))
}

/// Forward over flat 196 inputs, without window validation.
pub fn forward_values<T: Scalar>(
    values: &[T],
    p: &LnLstmParams<T>,
) -> Result<(PredictionOutput<T>, ActivationTrace<T>)> {
    if values.len() != FRAMES * FRAME_WIDTH {
        return Err(CoreError::Shape(format!(
            "expected {} inputs, got {}",
            FRAMES * FRAME_WIDTH,
            values.len()
        )));
    }
    let mut h = vec![T::zero(); p.hidden];
    let mut c = vec![T::zero(); p.hidden];
    let mut steps = Vec::with_capacity(FRAMES);
    for k in 0..FRAMES {
        let frame = &values[k * FRAME_WIDTH..(k + 1) * FRAME_WIDTH];
        let (h2, c2, tr) = lstm_step_at(k, frame, &h, &c, p)?;
        h = h2;
        c = c2;
        steps.push(tr);
    }
    let logits = head_logits(p, &h);
    check("logits", FRAMES - 1, &logits)?;
    let out = PredictionOutput::from_logits(&logits);
    Ok((
        out,
        ActivationTrace {
            hidden: p.hidden,
            steps,
            logits,
        },
    ))
}

/// Four recurrent steps from zero state, dense head on the final hidden state.
pub fn forward<T: Scalar>(
    w: &ObservationWindow<T>,
    p: &LnLstmParams<T>,
) -> Result<(PredictionOutput<T>, ActivationTrace<T>)> {
    w.validate()?;
    forward_values(w.values(), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::WINDOW_LEN;

    fn random_values(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..WINDOW_LEN).map(|_| rng.gen_range(0.0..2.0)).collect()
    }

    #[test]
    fn zero_weights_give_symmetric_hidden_state() {
        let p = LnLstmParams::<f64>::zeros(8);
        let (h, c, _) = lstm_step(&random_values(1)[..49], &[0.0; 8], &[0.0; 8], &p).unwrap();
        assert!(h.windows(2).all(|w| w[0] == w[1]));
        assert!(c.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut p = LnLstmParams::<f64>::random(8, 3);
        p.head_weight = Matrix::zeros(3, 8);
        p.head_bias = vec![0.0; 3];
        let w = ObservationWindow::from_values(random_values(2)).unwrap();
        let (out, trace) = forward(&w, &p).unwrap();
        for pr in out.probabilities {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn first_step_ignores_recurrent_weights() {
        let p = LnLstmParams::<f64>::random(6, 4);
        let mut q = p.clone();
        for v in q.w_recurrent.as_mut_slice() {
            *v *= -3.0;
        }
        let frame = &random_values(5)[..49];
        let a = lstm_step(frame, &[0.0; 6], &[0.0; 6], &p).unwrap();
        let b = lstm_step(frame, &[0.0; 6], &[0.0; 6], &q).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn deterministic_and_replayable() {
        let p = LnLstmParams::<f64>::random(16, 9);
        let w = ObservationWindow::from_values(random_values(6)).unwrap();
        let (o1, t1) = forward(&w, &p).unwrap();
        let (o2, t2) = forward(&w, &p).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(t1, t2);
        assert_eq!(t1.replay_logits(&p), t1.logits);
        let s: f64 = o1.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_intermediate_names_site() {
        let mut p = LnLstmParams::<f64>::random(4, 1);
        p.w_input.set(0, 0, f64::INFINITY);
        let w = ObservationWindow::from_values(random_values(2)).unwrap();
        let err = forward(&w, &p).unwrap_err();
        assert!(err.to_string().contains("input projection"), "{err}");
    }

    #[test]
    fn validates_shapes() {
        let mut p = LnLstmParams::<f64>::zeros(4);
        assert!(p.validate().is_ok());
        p.gate_bias.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn works_in_f32() {
        let p = LnLstmParams::<f32>::random(8, 2);
        let w = ObservationWindow::<f64>::from_values(random_values(3)).unwrap().cast::<f32>();
        let (out, _) = forward(&w, &p).unwrap();
        let s: f32 = out.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}
