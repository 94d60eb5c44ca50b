//! Adam optimizer with bias correction over a [`ParamSet`].

use crate::error::NnError;
use crate::scalar::Real;
use crate::transformer::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Moment state is kept in the parameter set's insertion order, so two runs
/// with identical seeds update identically.
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .collect();
        Adam {
            cfg,
            t: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients currently accumulated on
    /// `params`, then clear them. Parameters without a gradient are left
    /// unchanged. A non-finite gradient aborts with an error before any
    /// parameter is touched.
    pub fn step(&mut self, params: &ParamSet<T>) -> Result<(), NnError> {
        assert_eq!(self.moments.len(), params.len(), "optimizer/param set mismatch");
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGrad(name.to_string()));
                }
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (m, v) = &mut self.moments[i];
            let mut data = p.to_vec();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(&data);
            p.zero_grad();
        }
        Ok(())
    }
}
