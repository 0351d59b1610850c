use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_VAR_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
    pub var_eps: T,
}

/// Statistics of one layer-norm call. `std` already includes `var_eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnStats<T> {
    pub mean: T,
    pub std: T,
}

impl<T: Scalar> LayerNormParams<T> {
    /// Unit gain, zero bias.
    pub fn identity(width: usize) -> Self {
        Self {
            gain: vec![T::one(); width],
            bias: vec![T::zero(); width],
            var_eps: T::lit(DEFAULT_VAR_EPS),
        }
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.is_empty() {
            return Err(CoreError::Shape("layer norm width must be >= 1".into()));
        }
        if self.bias.len() != self.gain.len() {
            return Err(CoreError::Shape(format!(
                "layer norm gain has {} entries, bias {}",
                self.gain.len(),
                self.bias.len()
            )));
        }
        if !(self.var_eps > T::zero()) {
            return Err(CoreError::Config("layer norm var_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn stats(&self, a: &[T]) -> LnStats<T> {
        let h = T::lit(a.len() as f64);
        let mean = a.iter().copied().sum::<T>() / h;
        let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / h;
        LnStats {
            mean,
            std: (var + self.var_eps).sqrt(),
        }
    }

    /// `y = g ⊙ (a − μ)/σ' + b`. The nonlinearity is left to the caller.
    pub fn forward(&self, a: &[T]) -> Result<(Vec<T>, LnStats<T>)> {
        if a.len() != self.width() {
            return Err(CoreError::Shape(format!(
                "layer norm of width {} applied to {} values",
                self.width(),
                a.len()
            )));
        }
        let st = self.stats(a);
        let y = a
            .iter()
            .zip(&self.gain)
            .zip(&self.bias)
            .map(|((&ai, &g), &b)| g * (ai - st.mean) / st.std + b)
            .collect();
        Ok((y, st))
    }

    /// Reverse-mode step. Returns `dL/da` and accumulates into `dgain`/`dbias` when given.
    pub fn backward(
        &self,
        a: &[T],
        stats: &LnStats<T>,
        dy: &[T],
        grads: Option<(&mut [T], &mut [T])>,
    ) -> Vec<T> {
        let h = T::lit(a.len() as f64);
        let xhat: Vec<T> = a.iter().map(|&v| (v - stats.mean) / stats.std).collect();
        if let Some((dg, db)) = grads {
            for i in 0..a.len() {
                dg[i] += dy[i] * xhat[i];
                db[i] += dy[i];
            }
        }
        let dxhat: Vec<T> = dy.iter().zip(&self.gain).map(|(&d, &g)| d * g).collect();
        let mean_d = dxhat.iter().copied().sum::<T>() / h;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(&d, &x)| d * x).sum::<T>() / h;
        dxhat
            .iter()
            .zip(&xhat)
            .map(|(&d, &x)| (d - mean_d - x * mean_dx) / stats.std)
            .collect()
    }
}
