//! Adam with bias correction and gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamBuffers;

pub const DEFAULT_LR: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_accum_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_accum_steps: 1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::InvalidConfig("grad_accum_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pending: Vec<Vec<f64>>,
    pending_count: usize,
}

impl AdamState {
    pub fn new<P: ParamBuffers + ?Sized>(config: AdamConfig, params: &P) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.buffer_lens().into_iter().map(|n| vec![0.0; n]).collect();
        Ok(AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros.clone(),
            pending: zeros,
            pending_count: 0,
        })
    }

    pub fn pending_count(&self) -> usize {
        self.pending_count
    }

    fn check_shape(&self, lens: &[usize]) -> Result<()> {
        let own: Vec<usize> = self.first_moment.iter().map(Vec::len).collect();
        if own != lens {
            return Err(Error::Shape {
                op: "optimizer",
                left: (own.len(), own.iter().sum()),
                right: (lens.len(), lens.iter().sum()),
            });
        }
        Ok(())
    }

    /// Adds `grads` to the pending window. Once `grad_accum_steps` gradients
    /// have been collected, applies one update with their mean and returns
    /// `true`.
    pub fn accumulate<P, G>(&mut self, params: &mut P, grads: &G) -> Result<bool>
    where
        P: ParamBuffers + ?Sized,
        G: ParamBuffers + ?Sized,
    {
        self.check_shape(&grads.buffer_lens())?;
        self.check_shape(&params.buffer_lens())?;
        self.pending.add_scaled(grads, 1.0);
        self.pending_count += 1;
        if self.pending_count >= self.config.grad_accum_steps {
            self.flush(params)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Applies whatever is pending (mean over the partial window). Returns
    /// whether an update happened.
    pub fn flush<P: ParamBuffers + ?Sized>(&mut self, params: &mut P) -> Result<bool> {
        if self.pending_count == 0 {
            return Ok(false);
        }
        let mut mean = std::mem::take(&mut self.pending);
        mean.scale(1.0 / self.pending_count as f64);
        self.apply_update(params, &mean)?;
        self.pending = mean;
        self.pending.iter_mut().for_each(|b| b.fill(0.0));
        self.pending_count = 0;
        Ok(true)
    }

    /// One Adam step with bias-corrected moments.
    pub fn apply_update<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamBuffers + ?Sized,
        G: ParamBuffers + ?Sized,
    {
        self.check_shape(&grads.buffer_lens())?;
        self.check_shape(&params.buffer_lens())?;
        self.step += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let grads = grads.buffers();
        let mut params = params.buffers_mut();
        for (b, g) in grads.iter().enumerate() {
            let m = &mut self.first_moment[b];
            let v = &mut self.second_moment[b];
            let theta = &mut params[b];
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
