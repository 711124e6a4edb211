use rand::Rng;

use super::param::{trunc_normal, Param};
use crate::error::Result;
use crate::tensor::{BatchNormStats, Graph, Real, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// A parameter or a named non-learnable buffer, in serialization order.
pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a str, &'a Tensor<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a str, &'a mut Tensor<T>),
}

pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |s| {
            if let Slot::Param(p) = s {
                out.push(p);
            }
        });
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut |s| {
            if let SlotMut::Param(p) = s {
                out.push(p);
            }
        });
        out
    }

    /// Every learnable scalar.
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |s| match s {
            Slot::Param(p) => out.push((p.name(), &p.value)),
            Slot::Buffer(n, t) => out.push((n, t)),
        });
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |s| match s {
            SlotMut::Param(p) => out.push((p.name().to_string(), &mut p.value)),
            SlotMut::Buffer(n, t) => out.push((n.to_string(), t)),
        });
        out
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn pull_grads(&mut self, g: &Graph<T>) {
        self.params_mut().into_iter().for_each(|p| p.pull_grad(g));
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                trunc_normal(&[fan_in, fan_out], INIT_STD, rng),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        g.linear(x, w, Some(b))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.weight));
        f(Slot::Param(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        f(SlotMut::Param(&mut self.weight));
        f(SlotMut::Param(&mut self.bias));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[dim]), false),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = self.gain.bind(g);
        let bias = self.bias.bind(g);
        g.layer_norm(x, gain, bias, NORM_EPS)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.gain));
        f(Slot::Param(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        f(SlotMut::Param(&mut self.gain));
        f(SlotMut::Param(&mut self.bias));
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub stats: BatchNormStats<T>,
    buffer_names: [String; 2],
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[dim]), false),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
            stats: BatchNormStats::new(dim),
            buffer_names: [format!("{name}.running_mean"), format!("{name}.running_var")],
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let gain = self.gain.bind(g);
        let bias = self.bias.bind(g);
        g.batch_norm(x, gain, bias, &mut self.stats, training)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.gain));
        f(Slot::Param(&self.bias));
        f(Slot::Buffer(&self.buffer_names[0], &self.stats.mean));
        f(Slot::Buffer(&self.buffer_names[1], &self.stats.var));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        f(SlotMut::Param(&mut self.gain));
        f(SlotMut::Param(&mut self.bias));
        f(SlotMut::Buffer(&self.buffer_names[0], &mut self.stats.mean));
        f(SlotMut::Buffer(&self.buffer_names[1], &mut self.stats.var));
    }
}

/// Depthwise 3×3 convolution with a `[D, 3, 3]` kernel.
#[derive(Clone, Debug)]
pub struct DwConv<T> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> DwConv<T> {
    pub fn new(name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        DwConv {
            kernel: Param::new(
                format!("{name}.kernel"),
                trunc_normal(&[dim, 3, 3], INIT_STD, rng),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let k = self.kernel.bind(g);
        let b = self.bias.bind(g);
        g.dw_conv3x3(x, k, b)
    }
}

impl<T: Real> Module<T> for DwConv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.kernel));
        f(Slot::Param(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        f(SlotMut::Param(&mut self.kernel));
        f(SlotMut::Param(&mut self.bias));
    }
}

/// Non-overlapping `P×P` patch projection to `D` channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub patch: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(name: &str, patch: usize, in_ch: usize, dim: usize, rng: &mut impl Rng) -> Self {
        PatchEmbed {
            patch,
            weight: Param::new(
                format!("{name}.weight"),
                trunc_normal(&[patch * patch * in_ch, dim], INIT_STD, rng),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        g.patch_embed(x, w, b, self.patch)
    }
}

impl<T: Real> Module<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        f(Slot::Param(&self.weight));
        f(Slot::Param(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        f(SlotMut::Param(&mut self.weight));
        f(SlotMut::Param(&mut self.bias));
    }
}
