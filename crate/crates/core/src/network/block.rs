//! The CliffordNet block: a gated geometric residual around the rolling
//! Clifford interaction. There is no feed-forward sub-block.

use rand::{Rng, RngCore};

use super::config::{BlockConfig, CtxMode, LocalContextKind};
use super::layers::{BatchNorm, DwConv, LayerNorm, Linear, Module, Slot, SlotMut};
use super::param::Param;
use crate::error::Result;
use crate::geometry::{clifford_interact, CliMode, ShiftSet};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Depthwise conv stack producing the local context field.
#[derive(Clone, Debug)]
pub struct LocalContext<T> {
    pub conv1: DwConv<T>,
    pub bn1: BatchNorm<T>,
    pub second: Option<(DwConv<T>, BatchNorm<T>)>,
}

impl<T: Real> LocalContext<T> {
    pub fn new(name: &str, dim: usize, kind: LocalContextKind, rng: &mut impl Rng) -> Self {
        let conv1 = DwConv::new(&format!("{name}.conv1"), dim, rng);
        let bn1 = BatchNorm::new(&format!("{name}.bn1"), dim);
        let second = match kind {
            LocalContextKind::Factorized => Some((
                DwConv::new(&format!("{name}.conv2"), dim, rng),
                BatchNorm::new(&format!("{name}.bn2"), dim),
            )),
            LocalContextKind::Single => None,
        };
        LocalContext { conv1, bn1, second }
    }

    /// Each stage is DWConv → BN → SiLU; spatial shape is preserved.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y, training)?;
        let mut y = g.silu(y);
        if let Some((conv, bn)) = &mut self.second {
            let z = conv.forward(g, y)?;
            let z = bn.forward(g, z, training)?;
            y = g.silu(z);
        }
        Ok(y)
    }
}

impl<T: Real> Module<T> for LocalContext<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        if let Some((conv, bn)) = &self.second {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        if let Some((conv, bn)) = &mut self.second {
            conv.visit_mut(f);
            bn.visit_mut(f);
        }
    }
}

/// Applies the self-energy suppression: `diff` subtracts the detail stream,
/// `abs` passes the context through.
pub fn make_context<T: Real>(
    g: &mut Graph<T>,
    z_det: Var,
    z_ctx: Var,
    mode: CtxMode,
) -> Result<Var> {
    match mode {
        CtxMode::Diff => g.sub(z_ctx, z_det),
        CtxMode::Abs => Ok(z_ctx),
    }
}

/// Global-context interaction: every token interacts with the spatial mean of
/// the field, then is projected back to `D` channels.
pub fn gffn_g<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    projection: &Linear<T>,
    shifts: &ShiftSet,
    mode: CliMode,
) -> Result<Var> {
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    let pooled = g.global_avg_pool(x)?;
    let context = g.broadcast_tokens(pooled, h, w)?;
    let raw = clifford_interact(g, x, context, shifts, mode)?;
    projection.forward(g, raw)
}

/// Stochastic depth: each sample's branch is zeroed with probability `rate`,
/// survivors are rescaled by `1 / (1 − rate)`.
pub fn drop_path<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let batch = g.shape(x)[0];
    let factors = (0..batch)
        .map(|_| {
            if rng.gen_bool(keep) {
                T::cast(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    g.scale_samples(x, factors)
}

#[derive(Clone, Debug)]
pub struct CliffordBlock<T> {
    pub config: BlockConfig,
    pub drop_path_rate: f64,
    pub norm: LayerNorm<T>,
    pub det: Linear<T>,
    pub context: LocalContext<T>,
    pub proj: Linear<T>,
    pub global_proj: Option<Linear<T>>,
    pub gate: Linear<T>,
    pub gamma: Param<T>,
}

impl<T: Real> CliffordBlock<T> {
    pub fn new(
        name: &str,
        dim: usize,
        config: &BlockConfig,
        drop_path_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(dim)?;
        let interact = config.cli_mode.output_channels(&config.shifts, dim);
        let global_proj = config
            .global_context()
            .then(|| Linear::new(&format!("{name}.global_proj"), interact, dim, rng));
        Ok(CliffordBlock {
            config: config.clone(),
            drop_path_rate,
            norm: LayerNorm::new(&format!("{name}.norm"), dim),
            det: Linear::new(&format!("{name}.det"), dim, dim, rng),
            context: LocalContext::new(&format!("{name}.context"), dim, config.local_context, rng),
            proj: Linear::new(&format!("{name}.proj"), interact, dim, rng),
            global_proj,
            gate: Linear::new(&format!("{name}.gate"), 2 * dim, dim, rng),
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor::full(&[dim], T::cast(config.layerscale_init)),
                false,
            ),
        })
    }

    /// `x` is `(B, h, w, D)`; the output has the same shape.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let x_ln = self.norm.forward(g, x)?;

        let z_det = self.det.forward(g, x_ln)?;
        let z_ctx = self.context.forward(g, x_ln, training)?;
        let z_ctx = make_context(g, z_det, z_ctx, self.config.ctx_mode)?;

        let raw = clifford_interact(g, z_det, z_ctx, &self.config.shifts, self.config.cli_mode)?;
        let mut g_feat = self.proj.forward(g, raw)?;
        if let Some(global_proj) = &self.global_proj {
            let glo = gffn_g(g, x_ln, global_proj, &self.config.shifts, self.config.cli_mode)?;
            g_feat = g.add(g_feat, glo)?;
        }

        let gate_in = g.concat_channels(&[x_ln, g_feat])?;
        let gate_logits = self.gate.forward(g, gate_in)?;
        let alpha = g.sigmoid(gate_logits);
        let act = g.silu(x_ln);
        let injected = g.mul(alpha, g_feat)?;
        let h_mix = g.add(act, injected)?;

        let gamma = self.gamma.bind(g);
        let step = g.mul(h_mix, gamma)?;
        let step = drop_path(g, step, self.drop_path_rate, training, rng)?;
        g.add(x, step)
    }
}

impl<T: Real> Module<T> for CliffordBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.norm.visit(f);
        self.det.visit(f);
        self.context.visit(f);
        self.proj.visit(f);
        if let Some(p) = &self.global_proj {
            p.visit(f);
        }
        self.gate.visit(f);
        f(Slot::Param(&self.gamma));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        self.norm.visit_mut(f);
        self.det.visit_mut(f);
        self.context.visit_mut(f);
        self.proj.visit_mut(f);
        if let Some(p) = &mut self.global_proj {
            p.visit_mut(f);
        }
        self.gate.visit_mut(f);
        f(SlotMut::Param(&mut self.gamma));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn make_context_modes() {
        let mut g = Graph::<f64>::new();
        let det = g.constant(rand_input(&[2, 3], 1));
        let ctx = g.constant(rand_input(&[2, 3], 2));
        let abs = make_context(&mut g, det, ctx, CtxMode::Abs).unwrap();
        assert_eq!(abs, ctx);
        let same = make_context(&mut g, ctx, ctx, CtxMode::Diff).unwrap();
        assert!(g.value(same).data().iter().all(|&v| v == 0.0));
        let diff = make_context(&mut g, det, ctx, CtxMode::Diff).unwrap();
        for k in 0..6 {
            let delta = g.value(diff).data()[k] - g.value(abs).data()[k];
            assert!((delta + g.value(det).data()[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn local_context_preserves_shape_and_has_5x5_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LocalContext::<f64>::new("ctx", 2, LocalContextKind::Factorized, &mut rng);
        // all-ones kernels so the impulse response covers the full support
        for conv in [&mut ctx.conv1, &mut ctx.second.as_mut().unwrap().0] {
            conv.kernel.value = Tensor::ones(&[2, 3, 3]);
        }
        let mut impulse = Tensor::zeros(&[1, 9, 9, 2]);
        impulse.data_mut()[(4 * 9 + 4) * 2] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(impulse);
        let y = ctx.forward(&mut g, x, false).unwrap();
        assert_eq!(g.shape(y), &[1, 9, 9, 2]);
        // baseline: response to an all-zero input
        let mut g0 = Graph::new();
        let z = g0.constant(Tensor::zeros(&[1, 9, 9, 2]));
        let y0 = ctx.forward(&mut g0, z, false).unwrap();
        let (a, b) = (g.value(y).data(), g0.value(y0).data());
        for yy in 0..9usize {
            for xx in 0..9usize {
                let k = (yy * 9 + xx) * 2;
                let inside = yy.abs_diff(4) <= 2 && xx.abs_diff(4) <= 2;
                assert_eq!(a[k] != b[k], inside, "pixel ({yy},{xx})");
                assert_eq!(a[k + 1], b[k + 1], "other channel untouched");
            }
        }
    }

    #[test]
    fn gffn_g_constant_field_has_zero_wedge_and_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shifts = ShiftSet::new(vec![1, 2]).unwrap();
        let proj = Linear::<f64>::new("p", 2 * 2 * 4, 4, &mut rng);
        let mut g = Graph::new();
        let row = [0.3, -0.2, 0.9, 0.1];
        let x = g.constant(Tensor::from_fn(&[2, 3, 3, 4], |k| row[k % 4]));
        let y = gffn_g(&mut g, x, &proj, &shifts, CliMode::Full).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 4]);
        let pooled = g.global_avg_pool(x).unwrap();
        let ctx = g.broadcast_tokens(pooled, 3, 3).unwrap();
        let raw = clifford_interact(&mut g, x, ctx, &shifts, CliMode::Wedge).unwrap();
        assert!(g.value(raw).max_abs() < 1e-15);

        let zero = Linear {
            weight: Param::new("w", Tensor::zeros(&[16, 4]), true),
            bias: Param::new("b", Tensor::zeros(&[4]), false),
        };
        let y0 = gffn_g(&mut g, x, &zero, &shifts, CliMode::Full).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_block_is_identity() {
        let mut cfg = ModelConfig::preset("nano-mini").unwrap().block;
        cfg.layerscale_init = 0.0;
        cfg.beta = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = CliffordBlock::<f32>::new("b", 8, &cfg, 0.0, &mut rng).unwrap();
        let x_val = Tensor::from_fn(&[2, 4, 4, 8], |k| ((k * 7919) % 101) as f32 / 17.0 - 3.0);
        for training in [false, true] {
            let mut g = Graph::new();
            let x = g.constant(x_val.clone());
            let y = block.forward(&mut g, x, training, &mut rng).unwrap();
            assert_eq!(g.value(y), &x_val);
        }
    }

    #[test]
    fn dropped_sample_passes_through() {
        let cfg = ModelConfig::preset("nano-mini").unwrap().block;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = CliffordBlock::<f32>::new("b", 8, &cfg, 0.5, &mut rng).unwrap();
        block.gamma.value = Tensor::ones(&[8]);
        let x_val = Tensor::from_fn(&[16, 2, 2, 8], |k| (k as f32 * 0.37).sin());
        let mut g = Graph::new();
        let x = g.constant(x_val.clone());
        let y = block.forward(&mut g, x, true, &mut rng).unwrap();
        let per = 2 * 2 * 8;
        let (mut dropped, mut kept) = (0, 0);
        for b in 0..16 {
            let same = g.value(y).data()[b * per..(b + 1) * per] == x_val.data()[b * per..(b + 1) * per];
            if same {
                dropped += 1;
            } else {
                kept += 1;
            }
        }
        assert!(dropped > 0 && kept > 0, "dropped {dropped}, kept {kept}");
    }
}
