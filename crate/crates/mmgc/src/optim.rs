//! AdamW with decoupled weight decay and the warmup+cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Linear warmup to `peak_lr` over `warmup` steps, then half-cosine decay to
/// zero at `total` steps.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup: usize, total: usize) -> Result<Schedule> {
        if warmup > total {
            return Err(Error::config(format!("warmup {warmup} exceeds total steps {total}")));
        }
        Ok(Schedule { peak_lr, warmup, total })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::InvalidStep { step, total: self.total });
        }
        if step < self.warmup {
            return Ok(self.peak_lr * step as f64 / self.warmup as f64);
        }
        let decay_len = self.total - self.warmup;
        if decay_len == 0 {
            return Ok(0.0);
        }
        let progress = (step - self.warmup) as f64 / decay_len as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// AdamW state: bias-corrected first/second moments per parameter (kept in
/// f64 regardless of compute precision) and a global step counter.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, weight_decay: f64) -> AdamW {
        let m = store.entries().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let v = store.entries().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step: `w <- w - lr * m_hat / (sqrt(v_hat) + eps)
    /// - lr * weight_decay * w`, using the tape gradients of the bound
    /// leaves. Parameters whose leaf received no gradient (unused in the
    /// graph, or frozen) are left untouched. Gradients are zeroed afterward.
    pub fn apply<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        bound: &Bound,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let param_ids: Vec<_> = store.entries().map(|(p, _)| p).collect();
        for p in param_ids {
            if !store.entry(p).trainable {
                continue;
            }
            let leaf = bound.id(p);
            let Some(grad) = tape.grad(leaf) else { continue };
            let name = store.entry(p).name.clone();
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::numeric(format!("gradient of {name}")));
            }
            let grads: Vec<f64> = grad.iter().map(|g| g.to_f64()).collect();
            let m = &mut self.m[p.0];
            let v = &mut self.v[p.0];
            let data = store.data_mut(p);
            for i in 0..grads.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let w = data[i].to_f64();
                let update = lr * m_hat / (v_hat.sqrt() + self.eps) + lr * self.weight_decay * w;
                data[i] = T::from_f64(w - update);
            }
            tape.zero_grad(leaf);
        }
        Ok(())
    }
}
