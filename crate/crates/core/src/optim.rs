//! AdamW with decoupled weight decay, the warmup + cosine schedule and
//! global-norm gradient clipping.

use std::f64::consts::PI;

use crate::nn::{ParamKind, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Linear warmup to `peak` over `warmup` steps, then a half cosine to zero
/// at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if total <= warmup {
            return Err(Error::Config(format!(
                "total steps {total} must exceed warmup steps {warmup}"
            )));
        }
        Ok(Schedule {
            peak,
            warmup,
            total,
        })
    }

    /// Learning rate at `step` in `[0, total]`; clamped outside.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step <= self.warmup {
            // No warmup: the schedule starts at the peak.
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * step as f64 / self.warmup as f64;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay layer-norm parameters and biases too.
    pub decay_all: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_all: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.values().map(|t| vec![T::zero(); t.numel()]).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. A missing gradient counts as zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (i, (g, e)) in grads.iter().zip(store.entries()).enumerate() {
            let n = e.value.numel();
            if g.as_ref().is_some_and(|g| g.shape() != e.value.shape()) || self.m[i].len() != n {
                return Err(Error::Contract(format!(
                    "gradient shape does not match parameter {}",
                    e.name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr_t) = (T::one(), T::lit(c.eps), T::lit(lr));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let decay = c.decay_all || e.kind == ParamKind::Weight;
            let wd = T::lit(if decay { c.weight_decay } else { 0.0 });
            let g = grads[i].as_ref().map(|g| g.data());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= lr_t * (mh / (vh.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}
