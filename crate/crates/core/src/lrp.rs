//! Layer-wise relevance propagation through a traced layer-normalized LSTM.
//!
//! Rule chain per timestep, walking backward from the logit of the explained class:
//!
//! 1. dense head: ε-rule, head bias and stabilizer residue are sinks
//! 2. `h = o ⊙ tanh(LN_cell(c))`: all-rule, the output gate gets nothing
//! 3. `LN_cell`: Ω-rule or identity rule
//! 4. copy rule: `c_k` collects from `LN_cell` and from `c_{k+1}`
//! 5. `c = f ⊙ c_prev + i ⊙ g̃`: accumulation rule
//! 6. both products: all-rule, forget and input gates get nothing
//! 7. `pre_g = LN_in(Wx) + LN_rec(Uh) + bias`: accumulation rule, bias share is a sink
//! 8. `LN_in`, `LN_rec`: Ω-rule or identity rule
//! 9. `W x`, `U h_prev`: ε-rule with zero bias
//! 10. copy rule: `h_{k-1}` collects from the recurrent projection (and from the head at the last step)
//!
//! Tanh and sigmoid on signal paths are transparent. Whatever reaches the zero initial
//! state is booked as a sink.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layer_norm::{LayerNormParams, LnStats};
use crate::lstm::{ActivationTrace, LnLstmParams};
use crate::relevance::{RelevanceMap, SinkLedger};
use crate::scalar::{compensated_sum, Scalar};
use crate::tensor::Matrix;
use crate::window::{Class, ObservationWindow, FRAME_WIDTH};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LnRule {
    #[default]
    Omega,
    Identity,
}

impl std::str::FromStr for LnRule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(LnRule::Omega),
            "identity" => Ok(LnRule::Identity),
            other => Err(CoreError::Config(format!("unknown layer-norm rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaVariant {
    /// `R_i = (z_i − z_i/H) · g_i/σ · Σ_j R_j / z_j`
    #[default]
    Literal,
    /// Pairwise contributions `g_j/σ · (δ_ij z_i − z_i/H)`, split per upper unit `j`.
    FullDecomposition,
}

impl std::str::FromStr for OmegaVariant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(OmegaVariant::Literal),
            "full-decomposition" | "full" => Ok(OmegaVariant::FullDecomposition),
            other => Err(CoreError::Config(format!("unknown omega variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    pub epsilon: f64,
    pub ln_rule: LnRule,
    pub omega_variant: OmegaVariant,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            ln_rule: LnRule::Omega,
            omega_variant: OmegaVariant::Literal,
        }
    }
}

impl LrpConfig {
    pub fn identity() -> Self {
        Self {
            ln_rule: LnRule::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(CoreError::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn stabilized<T: Scalar>(z: T, eps: T) -> T {
    z + eps * z.signum_nonneg()
}

/// `R_j / (z_j + ε·sign(z_j))`, zero where `R_j = 0`.
fn ratios<T: Scalar>(r_out: &[T], z: &[T], eps: T, site: &str) -> Result<Vec<T>> {
    r_out
        .iter()
        .zip(z)
        .enumerate()
        .map(|(j, (&r, &z))| {
            if r == T::zero() {
                return Ok(T::zero());
            }
            let d = stabilized(z, eps);
            if d == T::zero() {
                Err(CoreError::DivisionHazard(format!("{site}[{j}]")))
            } else {
                Ok(r / d)
            }
        })
        .collect()
}

fn total<T: Scalar>(v: &[T]) -> T {
    compensated_sum(v.iter().copied())
}

/// ε-rule through `z = W x (+ bias)`. Returns input relevance and the sink residue
/// (bias share plus stabilizer absorption).
pub fn lrp_epsilon<T: Scalar>(
    r_out: &[T],
    weights: &Matrix<T>,
    inputs: &[T],
    z: &[T],
    epsilon: T,
) -> Result<(Vec<T>, T)> {
    if weights.rows() != r_out.len() || weights.cols() != inputs.len() || z.len() != r_out.len() {
        return Err(CoreError::Shape(format!(
            "ε-rule: weights {}×{}, relevance {}, inputs {}, z {}",
            weights.rows(),
            weights.cols(),
            r_out.len(),
            inputs.len(),
            z.len()
        )));
    }
    let s = ratios(r_out, z, epsilon, "linear")?;
    let back = weights.matvec_t(&s);
    let r_in: Vec<T> = back.iter().zip(inputs).map(|(&b, &x)| b * x).collect();
    let residue = total(r_out) - total(&r_in);
    Ok((r_in, residue))
}

/// Copy rule: a source read by several consumers collects the sum of their relevances.
pub fn lrp_copy<T: Scalar>(r_outs: &[&[T]]) -> Result<Vec<T>> {
    let Some(first) = r_outs.first() else {
        return Err(CoreError::Shape("copy rule needs at least one consumer".into()));
    };
    let mut acc = first.to_vec();
    for r in &r_outs[1..] {
        if r.len() != acc.len() {
            return Err(CoreError::Shape("copy rule widths differ".into()));
        }
        for (a, &v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    Ok(acc)
}

/// All-rule for `s ⊙ g`: the signal receives everything, the gate nothing.
pub fn lrp_gate<T: Scalar>(r_out: &[T]) -> (Vec<T>, Vec<T>) {
    (r_out.to_vec(), vec![T::zero(); r_out.len()])
}

/// Accumulation rule for `z = Σ_m a_m` (per unit). Returns one relevance vector per
/// addend and the stabilizer residue.
pub fn lrp_accumulate<T: Scalar>(
    r_out: &[T],
    addends: &[&[T]],
    epsilon: T,
) -> Result<(Vec<Vec<T>>, T)> {
    if addends.iter().any(|a| a.len() != r_out.len()) {
        return Err(CoreError::Shape("accumulation addend widths differ".into()));
    }
    let z: Vec<T> = (0..r_out.len())
        .map(|u| addends.iter().map(|a| a[u]).sum())
        .collect();
    let s = ratios(r_out, &z, epsilon, "accumulation")?;
    let parts: Vec<Vec<T>> = addends
        .iter()
        .map(|a| a.iter().zip(&s).map(|(&v, &q)| v * q).collect())
        .collect();
    let distributed = compensated_sum(parts.iter().flatten().copied());
    Ok((parts, total(r_out) - distributed))
}

/// Ω-rule for `y = g ⊙ (a − μ)/σ + b`. `upper_z` are the layer-norm outputs (the
/// pre-nonlinearity values of the next layer). `σ` is held constant; the bias and
/// whatever the rule does not redistribute are returned as the sink residue.
pub fn lrp_omega<T: Scalar>(
    r_out: &[T],
    a: &[T],
    ln: &LayerNormParams<T>,
    stats: &LnStats<T>,
    upper_z: &[T],
    epsilon: T,
    variant: OmegaVariant,
) -> Result<(Vec<T>, T)> {
    let width = a.len();
    if r_out.len() != width || upper_z.len() != width || ln.width() != width {
        return Err(CoreError::Shape(format!(
            "Ω-rule: relevance {}, input {}, upper z {}, layer width {}",
            r_out.len(),
            width,
            upper_z.len(),
            ln.width()
        )));
    }
    let h = T::lit(width as f64);
    let sigma = stats.std;
    let s = ratios(r_out, upper_z, epsilon, "layer norm")?;
    let r_in: Vec<T> = match variant {
        OmegaVariant::Literal => {
            let s_total = total(&s);
            (0..width)
                .map(|i| (a[i] - a[i] / h) * (ln.gain[i] / sigma) * s_total)
                .collect()
        }
        OmegaVariant::FullDecomposition => {
            let gs: T = ln.gain.iter().zip(&s).map(|(&g, &q)| g * q).sum();
            (0..width)
                .map(|i| a[i] * ln.gain[i] / sigma * s[i] - a[i] / h / sigma * gs)
                .collect()
        }
    };
    let residue = total(r_out) - total(&r_in);
    Ok((r_in, residue))
}

/// Identity rule for layer normalization.
pub fn lrp_identity_ln<T: Scalar>(r_out: &[T]) -> Vec<T> {
    r_out.to_vec()
}

/// Result of [`explain`].
#[derive(Debug, Clone, PartialEq)]
pub struct LrpExplanation<T> {
    pub relevance: RelevanceMap<T>,
    pub ledger: SinkLedger<T>,
    pub target: Class,
    /// `f_c(x)`, the relevance injected at the head.
    pub start_value: T,
}

impl<T: Scalar> LrpExplanation<T> {
    /// `Σ input relevance + Σ sinks`, summed without intermediate rounding of either total.
    pub fn accounted_total(&self) -> T {
        compensated_sum(self.relevance.values().iter().copied().chain(self.ledger.sink_parts()))
    }
}

struct Chain<'a, T> {
    cfg: &'a LrpConfig,
    eps: T,
    ledger: SinkLedger<T>,
}

impl<T: Scalar> Chain<'_, T> {
    fn layer_norm(
        &mut self,
        site: String,
        ln: &Option<LayerNormParams<T>>,
        stats: &Option<LnStats<T>>,
        a: &[T],
        y: &[T],
        r_out: &[T],
    ) -> Result<Vec<T>> {
        let (Some(ln), Some(st)) = (ln, stats) else {
            return Ok(r_out.to_vec());
        };
        match self.cfg.ln_rule {
            LnRule::Identity => {
                let r = lrp_identity_ln(r_out);
                self.ledger.book_balance(site, r_out, &r);
                Ok(r)
            }
            LnRule::Omega => {
                let (r, _) = lrp_omega(r_out, a, ln, st, y, self.eps, self.cfg.omega_variant)?;
                self.ledger.book_balance(site, r_out, &r);
                Ok(r)
            }
        }
    }
}

/// Relevance of every input entry for the logit of `target`, plus full sink accounting.
pub fn explain<T: Scalar>(
    window: &ObservationWindow<T>,
    p: &LnLstmParams<T>,
    trace: &ActivationTrace<T>,
    target: Class,
    cfg: &LrpConfig,
) -> Result<LrpExplanation<T>> {
    cfg.validate()?;
    trace.check_against(p)?;
    let first = &trace.steps[0];
    if first.x != p.scaler.apply(window.frame(0)) {
        return Err(CoreError::TraceMismatch(
            "trace input does not match the window".into(),
        ));
    }
    explain_trace(p, trace, target, cfg)
}

/// [`explain`] without re-checking the window against the trace.
pub fn explain_trace<T: Scalar>(
    p: &LnLstmParams<T>,
    trace: &ActivationTrace<T>,
    target: Class,
    cfg: &LrpConfig,
) -> Result<LrpExplanation<T>> {
    cfg.validate()?;
    trace.check_against(p)?;
    let hd = p.hidden;
    let eps = T::lit(cfg.epsilon);
    let start_value = trace.logits[target.index()];
    let mut chain = Chain {
        cfg,
        eps,
        ledger: SinkLedger::new(start_value),
    };

    let steps = &trace.steps;
    let last = steps.last().expect("trace checked");
    let mut r_logits = vec![T::zero(); trace.logits.len()];
    r_logits[target.index()] = start_value;
    let (mut r_h, _) = lrp_epsilon(&r_logits, &p.head_weight, &last.h, &trace.logits, eps)?;
    chain.ledger.book_balance("head", &r_logits, &r_h);

    let mut r_c_future = vec![T::zero(); hd];
    let mut relevance = vec![T::zero(); steps.len() * FRAME_WIDTH];

    for (k, st) in steps.iter().enumerate().rev() {
        let tag = |name: &str| format!("k{k}.{name}");

        // h = o ⊙ tanh(LN_cell(c))
        let (r_cell_norm, r_output_gate) = lrp_gate(&r_h);
        chain.ledger.book_gate(tag("output_gate"), &r_output_gate);
        let r_c_from_h = chain.layer_norm(
            tag("ln_cell"),
            &p.ln_cell,
            &st.ln_cell_stats,
            &st.c,
            &st.ln_cell_out,
            &r_cell_norm,
        )?;
        let r_c = lrp_copy(&[&r_c_from_h, &r_c_future])?;

        // c = f ⊙ c_prev + i ⊙ g̃
        let forget_term: Vec<T> = (0..hd).map(|u| st.forget_gate[u] * st.c_prev[u]).collect();
        let input_term: Vec<T> = (0..hd).map(|u| st.input_gate[u] * st.candidate[u]).collect();
        let (parts, _) = lrp_accumulate(&r_c, &[&forget_term, &input_term], eps)?;
        // booked against the unrounded copy inputs so the copy's rounding lands here too
        let incoming: Vec<T> = r_c_from_h.iter().chain(&r_c_future).copied().collect();
        chain.ledger.book_balance(tag("cell_accumulation"), &incoming, &parts.concat());
        let (r_c_prev, r_forget) = lrp_gate(&parts[0]);
        let (r_candidate, r_input_gate) = lrp_gate(&parts[1]);
        chain.ledger.book_gate(tag("forget_gate"), &r_forget);
        chain.ledger.book_gate(tag("input_gate"), &r_input_gate);

        // only the candidate block of the pre-activation carries relevance
        let mut r_pre = vec![T::zero(); 4 * hd];
        r_pre[3 * hd..].copy_from_slice(&r_candidate);
        let (parts, _) = lrp_accumulate(
            &r_pre,
            &[&st.ln_input_out, &st.ln_recurrent_out, &p.gate_bias],
            eps,
        )?;
        chain.ledger.book_balance(tag("gate_bias"), &r_pre, &parts[..2].concat());

        let r_proj_in = chain.layer_norm(
            tag("ln_input"),
            &p.ln_input,
            &st.ln_input_stats,
            &st.proj_input,
            &st.ln_input_out,
            &parts[0],
        )?;
        let r_proj_rec = chain.layer_norm(
            tag("ln_recurrent"),
            &p.ln_recurrent,
            &st.ln_recurrent_stats,
            &st.proj_recurrent,
            &st.ln_recurrent_out,
            &parts[1],
        )?;

        let (r_x, _) = lrp_epsilon(&r_proj_in, &p.w_input, &st.x, &st.proj_input, eps)?;
        chain.ledger.book_balance(tag("input_projection"), &r_proj_in, &r_x);
        relevance[k * FRAME_WIDTH..(k + 1) * FRAME_WIDTH].copy_from_slice(&r_x);

        let (r_h_prev, _) = lrp_epsilon(
            &r_proj_rec,
            &p.w_recurrent,
            &st.h_prev,
            &st.proj_recurrent,
            eps,
        )?;
        chain.ledger.book_balance(tag("recurrent_projection"), &r_proj_rec, &r_h_prev);

        r_h = lrp_copy(&[&r_h_prev])?;
        r_c_future = r_c_prev;
    }
    chain
        .ledger
        .book_terms("initial_state", r_h.iter().chain(&r_c_future).copied());

    let relevance = RelevanceMap::new(relevance)?;
    chain.ledger.total_out = relevance.total();
    Ok(LrpExplanation {
        relevance,
        ledger: chain.ledger,
        target,
        start_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::forward;
    use crate::window::WINDOW_LEN;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epsilon_single_path() {
        let w = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let (r, res) = lrp_epsilon(&[6.0], &w, &[3.0], &[6.0], 0.0).unwrap();
        assert_eq!(r, vec![6.0]);
        assert_eq!(res, 0.0);
    }

    #[test]
    fn epsilon_proportional_split() {
        let w = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let (r, _) = lrp_epsilon(&[4.0], &w, &[1.0, 3.0], &[4.0], 0.0).unwrap();
        assert_eq!(r, vec![1.0, 3.0]);
    }

    #[test]
    fn epsilon_division_hazard() {
        let w = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let err = lrp_epsilon(&[1.0], &w, &[2.0, 2.0], &[0.0], 0.0).unwrap_err();
        assert!(matches!(err, CoreError::DivisionHazard(_)));
        // stabilized with sign(0) = +1
        let (r, res) = lrp_epsilon(&[1.0], &w, &[2.0, 2.0], &[0.0], 0.5).unwrap();
        assert_eq!(r, vec![4.0, -4.0]);
        assert_eq!(res, 1.0);
    }

    #[test]
    fn bias_share_is_residue() {
        let w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        // z = 1·3 + 1 (bias)
        let (r, res) = lrp_epsilon(&[8.0], &w, &[3.0], &[4.0], 0.0).unwrap();
        assert_eq!(r, vec![6.0]);
        assert_eq!(res, 2.0);
    }

    #[test]
    fn copy_rule() {
        assert_eq!(
            lrp_copy(&[&[1.0, 2.0][..], &[3.0, 4.0][..]]).unwrap(),
            vec![4.0, 6.0]
        );
        assert_eq!(lrp_copy(&[&[5.0, -1.0][..]]).unwrap(), vec![5.0, -1.0]);
        let r = 3.0;
        let share = [r / 3.0];
        assert_eq!(lrp_copy(&[&share[..], &share[..], &share[..]]).unwrap(), vec![r]);
        assert!(lrp_copy::<f64>(&[]).is_err());
    }

    #[test]
    fn gate_rule_is_value_independent() {
        let (s, g) = lrp_gate(&[2.5]);
        assert_eq!(s, vec![2.5]);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn accumulation_examples() {
        let (p, res) = lrp_accumulate(&[4.0], &[&[1.0][..], &[3.0][..]], 0.0).unwrap();
        assert_eq!(p, vec![vec![1.0], vec![3.0]]);
        assert_eq!(res, 0.0);
        let (p, _) = lrp_accumulate(&[2.0], &[&[5.0][..], &[0.0][..]], 0.0).unwrap();
        assert_eq!(p, vec![vec![2.0], vec![0.0]]);
        let (p, _) = lrp_accumulate(&[4.0f64], &[&[-1.0][..], &[3.0][..]], 1e-3).unwrap();
        assert!((p[0][0] - (-4.0 / 2.001)).abs() < 1e-12);
        assert!((p[1][0] - (12.0 / 2.001)).abs() < 1e-12);
        assert!(lrp_accumulate(&[1.0], &[&[1.0][..], &[-1.0][..]], 0.0).is_err());
    }

    fn hand_ln() -> (LayerNormParams<f64>, LnStats<f64>) {
        (
            LayerNormParams {
                gain: vec![1.0, 1.0],
                bias: vec![0.0, 0.0],
                var_eps: 1e-5,
            },
            LnStats {
                mean: 2.0,
                std: 1.0,
            },
        )
    }

    #[test]
    fn omega_hand_examples() {
        let (ln, st) = hand_ln();
        let (r, _) = lrp_omega(
            &[0.0, 1.0],
            &[1.0, 3.0],
            &ln,
            &st,
            &[-1.0, 1.0],
            0.0,
            OmegaVariant::Literal,
        )
        .unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 1.5).abs() < 1e-12);
        let (r, _) = lrp_omega(
            &[1.0, 0.0],
            &[1.0, 3.0],
            &ln,
            &st,
            &[-1.0, 1.0],
            0.0,
            OmegaVariant::Literal,
        )
        .unwrap();
        assert!((r[0] + 0.5).abs() < 1e-12 && (r[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn omega_full_decomposition_hand_example() {
        // c_{i→j} = g_j/σ (δ_ij a_i − a_i/H): for a = [1, 3], H = 2, σ = 1
        // c_{0→0} = 0.5, c_{1→0} = -1.5, c_{0→1} = -0.5, c_{1→1} = 1.5
        let (ln, st) = hand_ln();
        let (r, res) = lrp_omega(
            &[0.0, 1.0],
            &[1.0, 3.0],
            &ln,
            &st,
            &[-1.0, 1.0],
            0.0,
            OmegaVariant::FullDecomposition,
        )
        .unwrap();
        assert!((r[0] + 0.5).abs() < 1e-12 && (r[1] - 1.5).abs() < 1e-12);
        // y_1 − b_1 = 1 is fully distributed, so nothing is absorbed
        assert!(res.abs() < 1e-12);
    }

    #[test]
    fn omega_degenerate_width() {
        let ln = LayerNormParams::<f64>::identity(1);
        let st = ln.stats(&[4.2]);
        for v in [OmegaVariant::Literal, OmegaVariant::FullDecomposition] {
            let (r, res) = lrp_omega(&[3.0], &[4.2], &ln, &st, &[0.0], 1e-3, v).unwrap();
            assert_eq!(r, vec![0.0]);
            assert_eq!(res, 3.0);
        }
    }

    #[test]
    fn identity_ln_rule() {
        assert_eq!(lrp_identity_ln(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    fn random_window(seed: u64) -> ObservationWindow<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObservationWindow::from_values((0..WINDOW_LEN).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn explain_balances_ledger_and_zeroes_gates() {
        let p = LnLstmParams::<f64>::random(12, 21);
        let w = random_window(4);
        let (_, tr) = forward(&w, &p).unwrap();
        for cfg in [LrpConfig::default(), LrpConfig::identity()] {
            let e = explain(&w, &p, &tr, Class::Right, &cfg).unwrap();
            assert_eq!(e.relevance.len(), 196);
            assert!(e.ledger.imbalance().abs() <= 1e-9 * e.start_value.abs().max(1.0));
            assert_eq!(e.ledger.gate_sites.len(), 12);
            assert!(e.ledger.gate_sites.values().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn explain_rejects_foreign_trace() {
        let p = LnLstmParams::<f64>::random(6, 1);
        let (_, tr) = forward(&random_window(1), &p).unwrap();
        assert!(matches!(
            explain(&random_window(2), &p, &tr, Class::Left, &LrpConfig::default()),
            Err(CoreError::TraceMismatch(_))
        ));
        let q = LnLstmParams::<f64>::random(7, 1);
        assert!(explain(&random_window(1), &q, &tr, Class::Left, &LrpConfig::default()).is_err());
    }
}
