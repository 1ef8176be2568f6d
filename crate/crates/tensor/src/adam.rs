use crate::error::{invalid, Result, TensorError};
use crate::params::ParamStore;

/// Adam optimiser state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from saved moments, e.g. when resuming training.
    pub fn restore(
        lr: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        params: &ParamStore,
    ) -> Result<Self> {
        let fits = |moments: &[Vec<f64>]| {
            moments.len() == params.len()
                && moments
                    .iter()
                    .zip(params.tensors())
                    .all(|(m, t)| m.len() == t.numel())
        };
        if !fits(&m) || !fits(&v) {
            return Err(invalid("adam", "moment shapes do not match parameters"));
        }
        let mut state = Self::new(lr, params);
        state.step = step;
        state.m = m;
        state.v = v;
        Ok(state)
    }

    /// One update of every parameter. `grads` is index-aligned with
    /// `params`; a missing entry is an error.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(
                "adam",
                format!(
                    "{} gradients for {} parameters (state for {})",
                    grads.len(),
                    params.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                Some(g) if g.len() == params.tensor(i).numel() => {}
                _ => return Err(TensorError::MissingGrad(params.name(i).to_string())),
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let g = g.expect("validated above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
