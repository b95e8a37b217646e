//! AdamW with decoupled weight decay and cosine-annealed learning rate.

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// `lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2`,
/// clamped to `lr_min` past `total_steps`.
pub fn cosine_lr(t: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t >= total_steps {
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// AdamW state: first/second moments per parameter plus the step counter.
pub struct AdamW<F> {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    t: usize,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(
        store: &ParamStore<F>,
        lr_max: f64,
        lr_min: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        total_steps: usize,
    ) -> Self {
        let m = store.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        AdamW {
            lr_max,
            lr_min,
            weight_decay,
            beta1,
            beta2,
            eps,
            total_steps,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Learning rate the next `step` call will use.
    pub fn next_lr(&self) -> f64 {
        cosine_lr(self.t, self.total_steps, self.lr_max, self.lr_min)
    }

    /// One update over every parameter with a gradient. Decay is decoupled:
    /// `p <- p - lr * wd * p` independent of the moment term. Returns the
    /// learning rate used.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<f64> {
        let lr = self.next_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::cast(self.beta1), F::cast(self.beta2));
        let one = F::one();
        let lr_f = F::cast(lr);
        let wd = F::cast(self.weight_decay);
        let eps = F::cast(self.eps);
        let (bc1, bc2) = (F::cast(bc1), F::cast(bc2));
        for idx in 0..store.len() {
            let param = store.get_mut(crate::nn::ParamId(idx));
            let numel = param.numel();
            let grad = match param.grad.take() {
                Some(g) => g,
                None => continue,
            };
            if grad.len() != numel {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: param.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                *p = *p * (one - lr_f * wd);
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    /// Restores moments and step counter (checkpoint load).
    pub fn restore(&mut self, m: Vec<Vec<F>>, v: Vec<Vec<F>>, t: usize) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid(
                "optimizer restore: moment table count mismatch",
            ));
        }
        for (new, old) in m.iter().zip(&self.m) {
            if new.len() != old.len() {
                return Err(Error::invalid(
                    "optimizer restore: moment length mismatch",
                ));
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
