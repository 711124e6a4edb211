use crate::error::{Error, Result};
use crate::network::Param;
use crate::tensor::{Real, Tensor};

/// `min_lr + ½(base_lr − min_lr)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay. Moments are kept per parameter, in the
/// order the parameters are passed to [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Default for AdamW<T> {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> AdamW<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update. Parameters without a gradient still receive weight decay
    /// (if they decay) and are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64, weight_decay: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let (one, eps) = (T::one(), T::cast(self.eps));
        let step_size = T::cast(lr / bc1);
        let bc2_sqrt = T::cast(bc2.sqrt());
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.shape() != p.value.shape() {
                return Err(Error::dims("adamw", m.shape(), p.value.shape()));
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::dims("adamw", g.shape(), p.value.shape()));
                }
            }
            let shrink = T::cast(1.0 - lr * if p.decays() { weight_decay } else { 0.0 });
            let grad = p.grad.as_ref().map(|g| g.data().to_vec());
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let gi = grad.as_ref().map_or(T::zero(), |g| g[i]);
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                values[i] = values[i] * shrink - step_size * mi / denom;
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let k = T::cast(max_norm / total);
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = *v * k);
            }
        }
    }
    total
}
