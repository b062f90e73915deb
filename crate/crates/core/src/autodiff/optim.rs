use super::params::ParamStore;
use crate::error::{config_err, Result};

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step and follow the store's parameter order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(
            lr,
            Self::DEFAULT_BETA1,
            Self::DEFAULT_BETA2,
            Self::DEFAULT_EPS,
        )
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        // lr = 0 is a legal no-op; negative or non-finite rates are not.
        if !lr.is_finite() || lr < 0.0 {
            return Err(config_err!("learning rate must be non-negative, got {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(config_err!(
                "invalid Adam hyperparameters beta1={beta1} beta2={beta2} eps={eps}"
            ));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store
                .iter()
                .map(|(_, p)| vec![0.0; p.value().len()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        adam_update(
            store,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.step,
            &mut self.m,
            &mut self.v,
        );
    }
}

/// One Adam update at step `step` (1-based) against explicit moment buffers.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    store: &mut ParamStore,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
) {
    let c1 = 1.0 - beta1.powf(step as f64);
    let c2 = 1.0 - beta2.powf(step as f64);
    for ((p, m), v) in store.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
        let frozen: Vec<usize> = p.frozen_rows().to_vec();
        let (value, grad) = p.parts_mut();
        if !frozen.is_empty() {
            let cols = value.shape()[1];
            for &r in &frozen {
                grad.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        let g = grad.data_mut();
        for (((w, gi), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        g.fill(0.0);
    }
}

/// Stateless single Adam step from zero moments.
///
/// Intended for one-off updates; training loops keep an [`Adam`] instance.
pub fn adam_step(
    store: &mut ParamStore,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(config_err!("learning rate must be positive, got {lr}"));
    }
    if step == 0 {
        return Err(config_err!("Adam step counter starts at 1"));
    }
    let mut m: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| vec![0.0; p.value().len()])
        .collect();
    let mut v = m.clone();
    adam_update(store, lr, beta1, beta2, eps, step, &mut m, &mut v);
    Ok(())
}
