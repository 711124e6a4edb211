use std::collections::HashMap;

use super::kernels::{self, MapDims, NormStats};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddChannel(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    ScaleSamples(Var, Vec<T>),
    Matmul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Roll(Var, usize),
    Silu(Var, Vec<T>),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    DwConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    PatchEmbed {
        x: Var,
        weight: Var,
        bias: Var,
        patch: usize,
        cols: Vec<T>,
    },
    GlobalAvgPool(Var),
    BroadcastTokens(Var),
    Concat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes are created in topological order, so
/// the backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<u64, Var>,
    pool: Vec<Vec<T>>,
}

/// Buffers shorter than this are not worth recycling.
const POOL_MIN: usize = 1024;

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            pool: Vec::new(),
        }
    }

    /// Drops every node but keeps their storage, so a loop that rebuilds the
    /// same graph each step stops allocating after the first one.
    pub fn reset(&mut self) {
        // whatever the last step left in the pool went unused for a whole
        // step; dropping it bounds the pool by one step's storage
        self.pool.clear();
        for node in self.nodes.drain(..) {
            self.pool.push(node.value.data);
            match node.op {
                Op::Silu(_, sig) => self.pool.push(sig),
                Op::PatchEmbed { cols, .. } => self.pool.push(cols),
                _ => {}
            }
        }
        self.pool.extend(self.grads.drain(..).flatten());
        self.pool.retain(|b| b.capacity() >= POOL_MIN);
        self.params.clear();
    }

    /// A buffer of `len` values with unspecified contents, reusing pooled
    /// storage when possible. Callers overwrite every element.
    fn scratch(&mut self, len: usize) -> Vec<T> {
        if len >= POOL_MIN {
            let mut best: Option<usize> = None;
            for (i, b) in self.pool.iter().enumerate() {
                let fits = b.capacity() >= len;
                if fits && best.is_none_or(|j| b.capacity() < self.pool[j].capacity()) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                let mut v = self.pool.swap_remove(i);
                v.resize(len, T::zero());
                return v;
            }
        }
        vec![T::zero(); len]
    }

    fn zeroed(&mut self, len: usize) -> Vec<T> {
        let mut v = self.scratch(len);
        v.fill(T::zero());
        v
    }

    fn recycle(&mut self, buf: Vec<T>) {
        if buf.capacity() >= POOL_MIN {
            self.pool.push(buf);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient on backward.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a model parameter, identified by `key`. Binding the same key
    /// twice returns the same leaf, so shared weights accumulate one gradient.
    pub fn param(&mut self, key: u64, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: u64) -> Option<Var> {
        self.params.get(&key).copied()
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = self
                .inputs_of(&op)
                .iter()
                .all(|v| self.nodes[v.0].value.all_finite());
            assert!(
                !inputs_finite,
                "non-finite output from finite inputs at node {}",
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddChannel(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulChannel(a, b)
            | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::ScaleSamples(a, _)
            | Op::Roll(a, _)
            | Op::Silu(a, _)
            | Op::Sigmoid(a)
            | Op::GlobalAvgPool(a)
            | Op::BroadcastTokens(a)
            | Op::Sum(a) => vec![*a],
            Op::Linear(x, w, b) => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::DwConv { x, kernel, bias } => vec![*x, *kernel, *bias],
            Op::PatchEmbed {
                x, weight, bias, ..
            } => vec![*x, *weight, *bias],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn unary_data(&mut self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        let mut out = self.scratch(self.value(a).len());
        for (o, x) in out.iter_mut().zip(self.value(a).data()) {
            *o = f(*x);
        }
        out
    }

    fn binary_data(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = self.scratch(self.value(a).len());
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for ((o, x), y) in out.iter_mut().zip(av).zip(bv) {
            *o = f(*x, *y);
        }
        out
    }

    fn channel_data(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = self.scratch(self.value(a).len());
        let bv = self.value(b).data();
        let d = bv.len();
        for (orow, row) in out.chunks_exact_mut(d).zip(self.value(a).data().chunks_exact(d)) {
            for ((o, x), y) in orow.iter_mut().zip(row).zip(bv) {
                *o = f(*x, *y);
            }
        }
        out
    }

    /// `b` is either the same shape as `a` or a rank-1 vector over `a`'s
    /// channel axis.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(true)
        } else {
            Err(Error::dims(op, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        if self.broadcast_kind("add", a, b)? {
            let data = self.channel_data(a, b, |x, y| x + y);
            Ok(self.push(Tensor { shape, data }, Op::AddChannel(a, b), rg))
        } else {
            let data = self.binary_data(a, b, |x, y| x + y);
            Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("sub", self.shape(a), self.shape(b)));
        }
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let data = self.binary_data(a, b, |x, y| x - y);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        if self.broadcast_kind("mul", a, b)? {
            let data = self.channel_data(a, b, |x, y| x * y);
            Ok(self.push(Tensor { shape, data }, Op::MulChannel(a, b), rg))
        } else {
            let data = self.binary_data(a, b, |x, y| x * y);
            Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
        }
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.unary_data(a, |v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, Op::Scale(a, c), rg)
    }

    /// Multiplies every element of sample `i` (leading axis) by `factors[i]`.
    pub fn scale_samples(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(Error::dims("scale_samples", &shape, &[factors.len()]));
        }
        let per = self.value(a).len() / factors.len().max(1);
        let data = self
            .value(a)
            .data()
            .chunks_exact(per.max(1))
            .zip(&factors)
            .flat_map(|(chunk, &f)| chunk.iter().map(move |&v| v * f))
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::ScaleSamples(a, factors), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = self.scratch(m * n);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    /// `x·W + b` applied over the channel axis: `x` is `[..., K]`, `weight` is
    /// `[K, N]`, `bias` is `[N]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::dims("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(Error::dims("linear bias", &sw, self.shape(b)));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut out = self.scratch(m * n);
        match bias {
            Some(b) => {
                let bv = self.value(b).data();
                for row in out.chunks_exact_mut(n) {
                    row.copy_from_slice(bv);
                }
            }
            None => out.fill(T::zero()),
        }
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let mut shape = sx;
        *shape.last_mut().expect("rank ≥ 1") = n;
        let mut ins = vec![x, weight];
        ins.extend(bias);
        let rg = self.any_grad(&ins);
        Ok(self.push(Tensor { shape, data: out }, Op::Linear(x, weight, bias), rg))
    }

    /// Cyclic channel shift: `out[..., c] = x[..., (c + s) mod D]`.
    pub fn roll_channels(&mut self, x: Var, s: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dims("roll_channels", &shape, &[]))?;
        if d == 0 {
            return Err(Error::dims("roll_channels", &shape, &[]));
        }
        let s = s % d;
        let mut data = self.scratch(self.value(x).len());
        for (orow, row) in data.chunks_exact_mut(d).zip(self.value(x).data().chunks_exact(d)) {
            orow[..d - s].copy_from_slice(&row[s..]);
            orow[d - s..].copy_from_slice(&row[..s]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Roll(x, s), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let sig = self.unary_data(x, kernels::sigmoid);
        let mut data = self.scratch(sig.len());
        for ((o, s), v) in data.iter_mut().zip(&sig).zip(self.value(x).data()) {
            *o = *v * *s;
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Silu(x, sig), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.unary_data(x, kernels::sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), rg)
    }

    /// Normalizes over the channel axis, then applies a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dims("layer_norm", &shape, self.shape(gain)));
        }
        let mut out = self.scratch(self.value(x).len());
        let stats = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            T::cast(eps),
            &mut out,
        );
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Normalizes each channel over every other axis. In training mode the
    /// batch statistics are used and folded into `stats` with its momentum;
    /// otherwise the running statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &mut BatchNormStats<T>,
        training: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dims("batch_norm", &shape, self.shape(gain)));
        }
        if stats.mean.shape() != [d] {
            return Err(Error::dims("batch_norm stats", &shape, stats.mean.shape()));
        }
        let eps = T::cast(stats.eps);
        let rows = self.value(x).len() / d;
        let (mean, rstd) = if training {
            let (mean, var) = kernels::channel_moments(self.value(x).data(), d);
            let m = T::cast(stats.momentum);
            let unbias = if rows > 1 {
                T::cast(rows as f64 / (rows - 1) as f64)
            } else {
                T::one()
            };
            for i in 0..d {
                let rm = &mut stats.mean.data_mut()[i];
                *rm = (T::one() - m) * *rm + m * mean[i];
                let rv = &mut stats.var.data_mut()[i];
                *rv = (T::one() - m) * *rv + m * var[i] * unbias;
            }
            let rstd: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            (mean, rstd)
        } else {
            let rstd: Vec<T> = stats
                .var
                .data()
                .iter()
                .map(|v| T::one() / (*v + eps).sqrt())
                .collect();
            (stats.mean.data().to_vec(), rstd)
        };
        let mut out = self.scratch(self.value(x).len());
        kernels::channel_normalize(
            self.value(x).data(),
            &mean,
            &rstd,
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            &mut out,
        );
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
                batch_stats: training,
            },
            rg,
        ))
    }

    fn map_dims(&self, op: &'static str, x: Var) -> Result<MapDims> {
        match *self.shape(x) {
            [batch, height, width, channels] => Ok(MapDims {
                batch,
                height,
                width,
                channels,
            }),
            _ => Err(Error::dims(op, self.shape(x), &[0, 0, 0, 0])),
        }
    }

    /// Depthwise 3×3 convolution (stride 1, zero padding 1); `kernel` is
    /// `[D, 3, 3]`, `bias` is `[D]`.
    pub fn dw_conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let dims = self.map_dims("dw_conv3x3", x)?;
        let d = dims.channels;
        if self.shape(kernel) != [d, 3, 3] || self.shape(bias) != [d] {
            return Err(Error::dims("dw_conv3x3", self.shape(x), self.shape(kernel)));
        }
        let mut out = self.scratch(self.value(x).len());
        kernels::dw_conv3x3_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            dims,
            &mut out,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::DwConv { x, kernel, bias },
            rg,
        ))
    }

    /// Non-overlapping `patch×patch` convolution with stride `patch`.
    /// `weight` is `[patch·patch·C_in, D]` with rows ordered
    /// (patch_row, patch_col, in_channel).
    pub fn patch_embed(&mut self, x: Var, weight: Var, bias: Var, patch: usize) -> Result<Var> {
        let dims = self.map_dims("patch_embed", x)?;
        if patch == 0 || dims.height % patch != 0 || dims.width % patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {patch}",
                dims.height, dims.width
            )));
        }
        let k = patch * patch * dims.channels;
        let sw = self.shape(weight).to_vec();
        if sw.len() != 2 || sw[0] != k || self.shape(bias) != [sw[1]] {
            return Err(Error::dims("patch_embed", self.shape(x), &sw));
        }
        let n = sw[1];
        let cols = kernels::im2col_patches(self.value(x).data(), dims, patch);
        let (gh, gw) = (dims.height / patch, dims.width / patch);
        let m = dims.batch * gh * gw;
        let mut out = self.scratch(m * n);
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(m, k, n, &cols, false, self.value(weight).data(), false, &mut out, true);
        let rg = self.any_grad(&[x, weight, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![dims.batch, gh, gw, n],
                data: out,
            },
            Op::PatchEmbed {
                x,
                weight,
                bias,
                patch,
                cols,
            },
            rg,
        ))
    }

    /// Mean over the spatial axes: `[B, h, w, D] → [B, D]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.map_dims("global_avg_pool", x)?;
        let (tokens, d) = (dims.height * dims.width, dims.channels);
        let inv = T::one() / T::cast(tokens as f64);
        let mut out = vec![T::zero(); dims.batch * d];
        for (b, sample) in self.value(x).data().chunks_exact(tokens * d).enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for tok in sample.chunks_exact(d) {
                for c in 0..d {
                    o[c] = o[c] + tok[c];
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![dims.batch, d],
                data: out,
            },
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Copies a per-sample vector to every token: `[B, D] → [B, h, w, D]`.
    pub fn broadcast_tokens(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (b, d) = match *self.shape(x) {
            [b, d] => (b, d),
            _ => return Err(Error::dims("broadcast_tokens", self.shape(x), &[0, 0])),
        };
        let mut out = self.scratch(b * height * width * d);
        let tokens = height * width;
        for (orow, row) in out.chunks_exact_mut(tokens * d).zip(self.value(x).data().chunks_exact(d)) {
            for tok in orow.chunks_exact_mut(d) {
                tok.copy_from_slice(row);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, height, width, d],
                data: out,
            },
            Op::BroadcastTokens(x),
            rg,
        ))
    }

    /// Concatenates along the channel axis; all other axes must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dims("concat_channels", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = self.scratch(rows * total);
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for (orow, row) in out.chunks_exact_mut(total).zip(src.chunks_exact(w)) {
                orow[offset..offset + w].copy_from_slice(row);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(xs.to_vec()), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = match *self.shape(logits) {
            [b, c] => (b, c),
            _ => return Err(Error::dims("cross_entropy", self.shape(logits), &[labels.len()])),
        };
        if labels.len() != b {
            return Err(Error::dims("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = T::zero();
        for (row, &label) in self.value(logits).data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss = loss - ((row[label] - max) - z.ln());
            probs.extend(exps.iter().map(|e| *e / z));
        }
        loss = loss / T::cast(b as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; interior gradients are rebuilt each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(old) = self.grads[i].take() {
                    self.recycle(old);
                }
            }
        }
        self.accumulate(loss, &[T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.recycle(g);
        }
        Ok(())
    }

    /// Removes `v`'s gradient buffer (zeroed if absent) so it can be written
    /// while node values are borrowed. Pair with [`Graph::put_grad`].
    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        match self.grads[v.0].take() {
            Some(buf) => Some(buf),
            None => Some(self.zeroed(self.nodes[v.0].value.len())),
        }
    }

    /// Returns a buffer from [`Graph::take_grad`]; if another buffer was
    /// stored for `v` in the meantime the two are summed.
    fn put_grad(&mut self, v: Var, buf: Vec<T>) {
        match self.grads[v.0].as_mut() {
            Some(existing) => {
                for (e, b) in existing.iter_mut().zip(&buf) {
                    *e = *e + *b;
                }
                self.recycle(buf);
            }
            None => self.grads[v.0] = Some(buf),
        }
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b = *b + *x;
                }
            }
            None => {
                let mut buf = self.scratch(g.len());
                buf.copy_from_slice(g);
                self.grads[v.0] = Some(buf);
            }
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(mut buf) = self.take_grad(v) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = *b + f(i);
            }
            self.put_grad(v, buf);
        }
    }

    fn channel_reduce(g: &[T], d: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
        let mut out = vec![T::zero(); d];
        for (r, row) in g.chunks_exact(d).enumerate() {
            for c in 0..d {
                out[c] = out[c] + f(r * d + c, row[c]);
            }
        }
        out
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Take the op out so node values can be borrowed while grads mutate.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddChannel(a, b) => {
                self.accumulate(*a, g);
                if self.requires_grad(*b) {
                    let d = self.value(*b).len();
                    let gb = Self::channel_reduce(g, d, |_, v| v);
                    self.accumulate(*b, &gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                if self.requires_grad(*b) {
                    self.accumulate_with(*b, |k| -g[k]);
                }
            }
            Op::Mul(a, b) => {
                if let Some(mut buf) = self.take_grad(*a) {
                    let bv = self.value(*b).data();
                    for ((o, gk), bk) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + *gk * *bk;
                    }
                    self.put_grad(*a, buf);
                }
                if let Some(mut buf) = self.take_grad(*b) {
                    let av = self.value(*a).data();
                    for ((o, gk), ak) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + *gk * *ak;
                    }
                    self.put_grad(*b, buf);
                }
            }
            Op::MulChannel(a, b) => {
                let d = self.value(*b).len();
                if let Some(mut buf) = self.take_grad(*a) {
                    let bv = self.value(*b).data();
                    for (orow, grow) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for c in 0..d {
                            orow[c] = orow[c] + grow[c] * bv[c];
                        }
                    }
                    self.put_grad(*a, buf);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = Self::channel_reduce(g, d, |k, v| v * av[k]);
                    self.accumulate(*b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_with(*a, |k| g[k] * c);
            }
            Op::ScaleSamples(a, factors) => {
                let per = g.len() / factors.len().max(1);
                self.accumulate_with(*a, |k| g[k] * factors[k / per]);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(mut buf) = self.take_grad(*a) {
                    T::gemm(m, n, k, g, false, self.value(*b).data(), true, &mut buf, true);
                    self.put_grad(*a, buf);
                }
                if let Some(mut buf) = self.take_grad(*b) {
                    T::gemm(k, m, n, self.value(*a).data(), true, g, false, &mut buf, true);
                    self.put_grad(*b, buf);
                }
            }
            Op::Linear(x, w, bias) => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = g.len() / n;
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let gb = Self::channel_reduce(g, n, |_, v| v);
                        self.accumulate(*b, &gb);
                    }
                }
                if let Some(mut buf) = self.take_grad(*x) {
                    T::gemm(m, n, k, g, false, self.value(*w).data(), true, &mut buf, true);
                    self.put_grad(*x, buf);
                }
                if let Some(mut buf) = self.take_grad(*w) {
                    T::gemm(k, m, n, self.value(*x).data(), true, g, false, &mut buf, true);
                    self.put_grad(*w, buf);
                }
            }
            Op::Roll(x, s) => {
                let d = self.value(*x).channels();
                let s = *s;
                if let Some(mut buf) = self.take_grad(*x) {
                    for (brow, grow) in buf.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for (c, &gv) in grow.iter().enumerate() {
                            let j = (c + s) % d;
                            brow[j] = brow[j] + gv;
                        }
                    }
                    self.put_grad(*x, buf);
                }
            }
            Op::Silu(x, sig) => {
                if let Some(mut buf) = self.take_grad(*x) {
                    let xv = self.value(*x).data();
                    for (k, o) in buf.iter_mut().enumerate() {
                        let s = sig[k];
                        *o = *o + g[k] * s * (T::one() + xv[k] * (T::one() - s));
                    }
                    self.put_grad(*x, buf);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(mut buf) = self.take_grad(*x) {
                    let yv = self.nodes[i].value.data();
                    for ((o, gk), y) in buf.iter_mut().zip(g).zip(yv) {
                        *o = *o + *gk * *y * (T::one() - *y);
                    }
                    self.put_grad(*x, buf);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let d = self.value(*gain).len();
                let mut dx = self.take_grad(*x);
                let mut dg = self.take_grad(*gain);
                let mut db = self.take_grad(*bias);
                kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    stats,
                    g,
                    d,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    self.put_grad(*x, v);
                }
                if let Some(v) = dg {
                    self.put_grad(*gain, v);
                }
                if let Some(v) = db {
                    self.put_grad(*bias, v);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
                batch_stats,
            } => {
                let d = self.value(*gain).len();
                let mut dx = self.take_grad(*x);
                let mut dg = self.take_grad(*gain);
                let mut db = self.take_grad(*bias);
                kernels::batch_norm_backward(
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    mean,
                    rstd,
                    g,
                    d,
                    *batch_stats,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    self.put_grad(*x, v);
                }
                if let Some(v) = dg {
                    self.put_grad(*gain, v);
                }
                if let Some(v) = db {
                    self.put_grad(*bias, v);
                }
            }
            Op::DwConv { x, kernel, bias } => {
                let dims = self.map_dims("dw_conv3x3", *x).expect("checked on forward");
                let mut dx = self.take_grad(*x);
                let mut dk = self.take_grad(*kernel);
                let mut db = self.take_grad(*bias);
                kernels::dw_conv3x3_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    dims,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    self.put_grad(*x, v);
                }
                if let Some(v) = dk {
                    self.put_grad(*kernel, v);
                }
                if let Some(v) = db {
                    self.put_grad(*bias, v);
                }
            }
            Op::PatchEmbed {
                x,
                weight,
                bias,
                patch,
                cols,
            } => {
                let dims = self.map_dims("patch_embed", *x).expect("checked on forward");
                let (k, n) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let m = g.len() / n;
                if self.requires_grad(*bias) {
                    let gb = Self::channel_reduce(g, n, |_, v| v);
                    self.accumulate(*bias, &gb);
                }
                if let Some(mut buf) = self.take_grad(*weight) {
                    T::gemm(k, m, n, cols, true, g, false, &mut buf, true);
                    self.put_grad(*weight, buf);
                }
                if let Some(mut buf) = self.take_grad(*x) {
                    let mut dcols = self.zeroed(m * k);
                    T::gemm(m, n, k, g, false, self.value(*weight).data(), true, &mut dcols, false);
                    kernels::col2im_patches(&dcols, dims, *patch, &mut buf);
                    self.put_grad(*x, buf);
                    self.recycle(dcols);
                }
            }
            Op::GlobalAvgPool(x) => {
                let dims = self.map_dims("global_avg_pool", *x).expect("checked");
                let (tokens, d) = (dims.height * dims.width, dims.channels);
                let inv = T::one() / T::cast(tokens as f64);
                self.accumulate_with(*x, |k| g[(k / (tokens * d)) * d + k % d] * inv);
            }
            Op::BroadcastTokens(x) => {
                let d = self.value(*x).channels();
                let b = self.shape(*x)[0];
                let tokens = g.len() / (b * d).max(1);
                let mut gx = vec![T::zero(); b * d];
                for (k, v) in g.iter().enumerate() {
                    let idx = (k / (tokens * d)) * d + k % d;
                    gx[idx] = gx[idx] + *v;
                }
                self.accumulate(*x, &gx);
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|v| self.value(*v).channels()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(&widths) {
                    if let Some(mut buf) = self.take_grad(v) {
                        for (brow, grow) in buf.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            for c in 0..w {
                                brow[c] = brow[c] + grow[offset + c];
                            }
                        }
                        self.put_grad(v, buf);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).channels();
                let scale = g[0] / T::cast(labels.len() as f64);
                self.accumulate_with(*logits, |k| {
                    let target = if labels[k / c] == k % c { T::one() } else { T::zero() };
                    (probs[k] - target) * scale
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate_with(*x, |_| g0);
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_and_identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, 10.0, 18.0]);

        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let v = g.constant(t(&[3, 1], &[7.0, -2.0, 0.5]));
        let r = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(r).data(), &[7.0, -2.0, 0.5]);
    }

    #[test]
    fn pool_stays_bounded_with_fresh_inputs() {
        let mut g = Graph::<f32>::new();
        let mut sizes = Vec::new();
        for _ in 0..20 {
            g.reset();
            let x = g.constant(Tensor::zeros(&[4096]));
            let y = g.silu(x);
            let z = g.mul(y, x).unwrap();
            let loss = g.sum(z);
            g.backward(loss).unwrap();
            sizes.push(g.pool.len());
        }
        assert!(sizes[5..].iter().all(|&n| n == sizes[5]), "{sizes:?}");
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn roll_follows_c_plus_s_convention() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = g.roll_channels(x, 1).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 3.0, 4.0, 1.0]);
        let r0 = g.roll_channels(x, 0).unwrap();
        assert_eq!(g.value(r0).data(), g.value(x).data());
        let back = g.roll_channels(r, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn roll_backward_is_inverse_roll() {
        let d = 5;
        for s in 0..d {
            let mut g = Graph::<f64>::new();
            let x = g.variable(Tensor::from_fn(&[d], |i| i as f64));
            let r = g.roll_channels(x, s).unwrap();
            let w = g.constant(Tensor::from_fn(&[d], |i| (i * i + 1) as f64));
            let p = g.mul(r, w).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap();
            let gx = g.grad(x).unwrap();
            // d/dx_j of Σ_c w_c x_{(c+s)%d} = w_{(j-s) mod d}
            for j in 0..d {
                let c = (j + d - s) % d;
                assert_eq!(gx.data()[j], g.value(w).data()[c]);
            }
        }
    }

    #[test]
    fn activations_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        let s = g.silu(x);
        let sg = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.0);
        assert_eq!(g.value(sg).data()[0], 0.5);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.value(s).data()[1] - want).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.731_058_578_6).abs() < 1e-9);
    }

    #[test]
    fn backward_of_scaled_sum() {
        let mut g = Graph::<f32>::new();
        let w = g.variable(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.scale(w, 2.0);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 2.0));
        // a second backward accumulates into the leaf
        g.backward(l).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let w = g.variable(Tensor::ones(&[3]));
        let d = g.detach(w);
        let l = g.sum(d);
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let w = g.variable(Tensor::ones(&[3]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn hadamard_grad_is_other_operand() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[3], &[0.3, -1.2, 2.0]));
        let b = g.variable(t(&[3], &[1.5, 0.25, -0.7]));
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), g.value(b).data());
        assert_eq!(g.grad(b).unwrap().data(), g.value(a).data());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let e0 = g.constant(Tensor::zeros(&[0]));
        assert!(g.layer_norm(empty, e0, e0, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_eval_is_affine_and_training_updates_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 3], |i| (i as f64 * 0.37).sin()));
        let gain = g.constant(t(&[3], &[1.0, 2.0, 0.5]));
        let bias = g.constant(t(&[3], &[0.0, 1.0, -1.0]));
        let mut stats = BatchNormStats::new(3);
        let y1 = g.batch_norm(x, gain, bias, &mut stats, false).unwrap();
        assert_eq!(stats, BatchNormStats::new(3));
        let y2 = g.batch_norm(x, gain, bias, &mut stats, false).unwrap();
        assert_eq!(g.value(y1), g.value(y2));
        let r = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (k, v) in g.value(y1).data().iter().enumerate() {
            let c = k % 3;
            let want = g.value(x).data()[k] * r * g.value(gain).data()[c] + g.value(bias).data()[c];
            assert!((v - want).abs() < 1e-12);
        }
        g.batch_norm(x, gain, bias, &mut stats, true).unwrap();
        assert_ne!(stats.mean.data(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::zeros(&[3, 10]));
        let l = g.cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(g.cross_entropy(z, &[0, 4, 10]), Err(Error::Data(_))));
    }

    #[test]
    fn patch_embed_rejects_indivisible_input() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 5, 4, 3]));
        let w = g.constant(Tensor::zeros(&[12, 8]));
        let b = g.constant(Tensor::zeros(&[8]));
        assert!(matches!(g.patch_embed(x, w, b, 2), Err(Error::Config(_))));
    }

    #[test]
    fn concat_and_pool_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 3, 3, 4], 1.5));
        let b = g.constant(Tensor::zeros(&[2, 3, 3, 4]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3, 8]);
        let p = g.global_avg_pool(a).unwrap();
        assert_eq!(g.shape(p), &[2, 4]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));
        let odd = g.constant(Tensor::zeros(&[2, 2, 3, 4]));
        assert!(g.concat_channels(&[a, odd]).is_err());
    }
}
