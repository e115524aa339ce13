use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Linear scaling rule: `base_lr · batch_size / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Learning rate at fractional epoch `t`: linear ramp to `peak` over
/// `warmup` epochs, then half-cosine decay to zero at `total`.
pub fn lr_at(t: f64, peak: f64, warmup: f64, total: f64) -> f64 {
    if t < warmup {
        return peak * t / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = ((t - warmup) / span).min(1.0);
    (peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-weight-decay Adam. Moments are created lazily per name.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// One update of every parameter in `params`. `decays(name)` selects the
    /// tensors that receive weight decay.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        decays: impl Fn(&str, &Tensor<T>) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::of(1.0 - c.beta1.powi(t));
        let bias2 = T::of(1.0 - c.beta2.powi(t));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        for (name, theta) in params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            if g.shape() != theta.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let wd = if decays(name, theta) {
                T::of(c.weight_decay)
            } else {
                T::zero()
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            for (((p, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}
