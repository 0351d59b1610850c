//! Reverse-mode derivatives of the logits, with respect to the raw inputs and the parameters.

use crate::error::Result;
use crate::layer_norm::{LayerNormParams, LnStats};
use crate::lstm::{forward, ActivationTrace, LnLstmParams, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::window::{Class, ObservationWindow, FRAME_WIDTH};

fn ln_backward<T: Scalar>(
    ln: &Option<LayerNormParams<T>>,
    stats: &Option<LnStats<T>>,
    grads: Option<&mut Option<LayerNormParams<T>>>,
    a: &[T],
    dy: &[T],
) -> Vec<T> {
    match (ln, stats) {
        (Some(ln), Some(st)) => {
            let g = grads.and_then(|g| g.as_mut()).map(|g| (&mut g.gain[..], &mut g.bias[..]));
            ln.backward(a, st, dy, g)
        }
        _ => dy.to_vec(),
    }
}

/// Backpropagate `dlogits` through a traced forward pass.
///
/// Returns the gradient with respect to the raw 196 inputs; parameter gradients are
/// accumulated into `param_grads` when provided (shapes from [`LnLstmParams::zeros_like`]).
pub fn backward<T: Scalar>(
    p: &LnLstmParams<T>,
    trace: &ActivationTrace<T>,
    dlogits: &[T],
    mut param_grads: Option<&mut LnLstmParams<T>>,
) -> Result<Vec<T>> {
    trace.check_against(p)?;
    let hd = p.hidden;
    let steps = &trace.steps;
    let last = steps.last().expect("trace checked");

    if let Some(g) = param_grads.as_deref_mut() {
        g.head_weight.add_outer(dlogits, &last.h);
        for (b, &d) in g.head_bias.iter_mut().zip(dlogits) {
            *b += d;
        }
    }
    let mut dh = p.head_weight.matvec_t(dlogits);
    let mut dc = vec![T::zero(); hd];
    let mut dx_all = vec![T::zero(); steps.len() * FRAME_WIDTH];

    for (k, st) in steps.iter().enumerate().rev() {
        // h = o ⊙ tanh(LN_cell(c))
        let mut dpre = vec![T::zero(); 4 * hd];
        let mut dy3 = vec![T::zero(); hd];
        for u in 0..hd {
            let o = st.output_gate[u];
            let th = st.cell_tanh[u];
            dpre[2 * hd + u] = dh[u] * th * o * (T::one() - o);
            dy3[u] = dh[u] * o * (T::one() - th * th);
        }
        let dc_ln = ln_backward(
            &p.ln_cell,
            &st.ln_cell_stats,
            param_grads.as_deref_mut().map(|g| &mut g.ln_cell),
            &st.c,
            &dy3,
        );
        for u in 0..hd {
            dc[u] += dc_ln[u];
        }
        // c = f ⊙ c_prev + i ⊙ g̃
        let mut dc_prev = vec![T::zero(); hd];
        for u in 0..hd {
            let (i, f, g) = (st.input_gate[u], st.forget_gate[u], st.candidate[u]);
            dpre[u] = dc[u] * g * i * (T::one() - i);
            dpre[hd + u] = dc[u] * st.c_prev[u] * f * (T::one() - f);
            dpre[3 * hd + u] = dc[u] * i * (T::one() - g * g);
            dc_prev[u] = dc[u] * f;
        }
        // pre = LN_in(W x) + LN_rec(U h_prev) + bias
        let da1 = ln_backward(
            &p.ln_input,
            &st.ln_input_stats,
            param_grads.as_deref_mut().map(|g| &mut g.ln_input),
            &st.proj_input,
            &dpre,
        );
        let da2 = ln_backward(
            &p.ln_recurrent,
            &st.ln_recurrent_stats,
            param_grads.as_deref_mut().map(|g| &mut g.ln_recurrent),
            &st.proj_recurrent,
            &dpre,
        );
        if let Some(g) = param_grads.as_deref_mut() {
            for (b, &d) in g.gate_bias.iter_mut().zip(&dpre) {
                *b += d;
            }
            g.w_input.add_outer(&da1, &st.x);
            g.w_recurrent.add_outer(&da2, &st.h_prev);
        }
        let dx = p.w_input.matvec_t(&da1);
        for (i, (&d, &s)) in dx.iter().zip(&p.scaler.scale).enumerate() {
            dx_all[k * FRAME_WIDTH + i] = d / s;
        }
        dh = p.w_recurrent.matvec_t(&da2);
        dc = dc_prev;
    }
    Ok(dx_all)
}

/// Gradient of the pre-softmax logit of `class` with respect to every raw input entry.
pub fn input_gradient<T: Scalar>(
    w: &ObservationWindow<T>,
    p: &LnLstmParams<T>,
    class: Class,
) -> Result<Vec<T>> {
    let (_, trace) = forward(w, p)?;
    let mut d = [T::zero(); NUM_CLASSES];
    d[class.index()] = T::one();
    backward(p, &trace, &d, None)
}
