use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Real, Tensor, Var};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    key: u64,
    name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    decay: bool,
}

impl<T: Real> Param<T> {
    /// `decay` marks the tensor for decoupled weight decay; norm affines,
    /// biases and LayerScale are created with `decay = false`.
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Param {
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: None,
            decay,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn decays(&self) -> bool {
        self.decay
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Var {
        g.param(self.key, &self.value)
    }

    /// Adds this parameter's gradient from `g`, if it was bound and reached.
    pub fn pull_grad(&mut self, g: &Graph<T>) {
        let Some(var) = g.param_var(self.key) else {
            return;
        };
        let Some(update) = g.grad(var) else {
            return;
        };
        match &mut self.grad {
            Some(acc) => {
                for (a, u) in acc.data_mut().iter_mut().zip(update.data()) {
                    *a = *a + *u;
                }
            }
            None => self.grad = Some(update),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::cast(v);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f32> = trunc_normal(&[4000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 4000.0;
        assert!(mean.abs() < 2e-3);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(t, trunc_normal(&[4000], 0.02, &mut rng2));
    }

    #[test]
    fn keys_are_unique_and_grads_accumulate() {
        let mut p = Param::new("w", Tensor::<f64>::ones(&[2]), true);
        let q = Param::new("w", Tensor::<f64>::ones(&[2]), true);
        assert_ne!(p.key(), q.key());
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        assert_eq!(p.bind(&mut g), v);
        let l = g.sum(v);
        g.backward(l).unwrap();
        p.pull_grad(&g);
        p.pull_grad(&g);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        p.zero_grad();
        assert!(p.grad.is_none());
    }
}
