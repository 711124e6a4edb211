//! Property suite behind `cliffordnet verify`.
//!
//! Every check returns a [`PropertyResult`] with the largest deviation seen,
//! so a failure says by how much it failed and not just where.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::oracle::{dense_product_oracle, extract_slice};
use crate::geometry::{eval, CliMode, ShiftSet};
use crate::network::{
    BlockConfig, CliffordBlock, CliffordNet, CtxMode, LocalContextKind, Module, ModelConfig,
    VARIANTS,
};
use crate::tensor::{Graph, Real, Tensor};

/// The shifted products under test. Swapping the implementation lets the
/// suite be checked against deliberately broken kernels.
pub trait InteractionKernel {
    fn dot(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32>;
    fn wedge(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32>;
}

/// The production rolling implementation.
pub struct Rolling;

fn vector(v: &[f32]) -> Tensor<f32> {
    Tensor::new(&[v.len()], v.to_vec()).expect("rank-1")
}

impl InteractionKernel for Rolling {
    fn dot(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
        eval::shifted_dot(&vector(h), &vector(c), s)
            .expect("equal shapes")
            .into_data()
    }

    fn wedge(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
        eval::shifted_wedge(&vector(h), &vector(c), s)
            .expect("equal shapes")
            .into_data()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl PropertyResult {
    fn new(name: &'static str, max_deviation: f64, tolerance: f64, cases: usize) -> Self {
        PropertyResult {
            name,
            passed: max_deviation <= tolerance,
            max_deviation,
            tolerance,
            cases,
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} max_dev={:.3e} tol={:.0e} cases={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_deviation,
            self.tolerance,
            self.cases
        )
    }
}

fn random_f32(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Rolling products against slices of the dense `D×D` matrices, for every
/// `D` in `dims`, every shift in `[1, D)` and `tokens` random pairs.
pub fn oracle_equivalence(kernel: &dyn InteractionKernel, dims: &[usize], tokens: usize, seed: u64) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &d in dims {
        for _ in 0..tokens {
            let h = random_f32(&mut rng, d);
            let c = random_f32(&mut rng, d);
            let hd: Vec<f64> = h.iter().map(|&v| v as f64).collect();
            let cd: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            let dense = dense_product_oracle(&hd, &cd);
            for s in 1..d {
                let want_dot: Vec<f64> = extract_slice(&dense.dot, d, s).into_iter().map(silu).collect();
                let want_wedge = extract_slice(&dense.wedge, d, s);
                let got_dot = kernel.dot(&h, &c, s);
                let got_wedge = kernel.wedge(&h, &c, s);
                for (got, want) in [(got_dot, want_dot), (got_wedge, want_wedge)] {
                    if got.len() != want.len() {
                        worst = f64::INFINITY;
                        continue;
                    }
                    for (g, w) in got.iter().zip(&want) {
                        worst = worst.max((*g as f64 - w).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    PropertyResult::new("oracle-equivalence", worst, 1e-6, cases)
}

/// Largest difference between values that are not exactly equal; `+0` and
/// `−0` count as equal, NaN never does.
fn exact_deviation(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, y)| ((x - y).abs() as f64).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn random_case(rng: &mut impl Rng) -> (Vec<f32>, Vec<f32>, usize) {
    let d = [4usize, 8, 16, 32, 64, 128][rng.gen_range(0..6)];
    let s = rng.gen_range(1..d);
    (random_f32(rng, d), random_f32(rng, d), s)
}

/// `W_s(h, c) = −W_s(c, h)` exactly.
pub fn anti_symmetry(kernel: &dyn InteractionKernel, cases: usize, seed: u64) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, c, s) = random_case(&mut rng);
        let fwd = kernel.wedge(&h, &c, s);
        let rev: Vec<f32> = kernel.wedge(&c, &h, s).iter().map(|v| -v).collect();
        worst = worst.max(exact_deviation(&fwd, &rev));
    }
    PropertyResult::new("anti-symmetry", worst, 0.0, cases)
}

/// `W_s(h, h) = 0` for every shift, and `W_0(h, c) = 0`.
pub fn self_annihilation(kernel: &dyn InteractionKernel, cases: usize, seed: u64) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, c, s) = random_case(&mut rng);
        let zeros = vec![0.0; h.len()];
        worst = worst.max(exact_deviation(&kernel.wedge(&h, &h, s), &zeros));
        worst = worst.max(exact_deviation(&kernel.wedge(&h, &c, 0), &zeros));
    }
    PropertyResult::new("self-annihilation", worst, 0.0, 2 * cases)
}

/// With every γ set to zero, each block of every preset returns its input
/// unchanged, bit for bit, in both training and eval mode.
pub fn gamma_zero_identity(variants: &[&str], seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for name in variants {
        let mut config = ModelConfig::preset(name)?;
        config.block.layerscale_init = 0.0;
        let mut model = CliffordNet::<f32>::new(&config, &mut rng)?;
        let x = Tensor::from_fn(&[2, 4, 4, config.dim], |_| rng.gen_range(-2.0f32..2.0));
        for block in &mut model.blocks {
            for training in [false, true] {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = block.forward(&mut g, xv, training, &mut rng)?;
                worst = worst.max(exact_deviation(g.value(y).data(), x.data()));
                cases += 1;
            }
        }
    }
    Ok(PropertyResult::new("gamma-zero-identity", worst, 0.0, cases))
}

/// Copies every tensor of `src` into `dst`, converting precision.
pub fn copy_tensors<T: Real, U: Real>(src: &impl Module<T>, dst: &mut impl Module<U>) {
    for ((_, d), (_, s)) in dst.named_tensors_mut().into_iter().zip(src.named_tensors()) {
        *d = s.cast();
    }
}

/// Sets every parameter to an f32-representable value in `[-1, 1)`, so the
/// same point can be evaluated in both precisions.
pub fn randomize_params<M: Module<f64>>(module: &mut M, rng: &mut impl Rng) {
    for p in module.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0f32..1.0) as f64;
        }
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` for one tensor.
fn rel_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Worst per-tensor relative error between analytic and numeric gradient
/// sets. Some tensors have an identically zero true gradient (a bias feeding a
/// batch norm); for those the ratio would measure rounding noise against
/// nothing, so their error is taken relative to the largest tensor gradient.
fn worst_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let largest = numeric.iter().map(|n| norm(n)).fold(0.0, f64::max);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let floor = if norm(n) < 1e-6 * largest { largest } else { 1e-30 };
            rel_error(a, n, floor)
        })
        .fold(0.0, f64::max)
}

/// Relative gradient errors of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradErrors {
    /// 32-bit analytic gradients against 64-bit central differences.
    pub single: f64,
    /// 64-bit analytic gradients against 64-bit central differences.
    pub double: f64,
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `loss` with respect to every element of every
/// tensor in `point`.
fn numeric_grads(point: &mut [Vec<f64>], mut loss: impl FnMut(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(point.len());
    for t in 0..point.len() {
        let mut grad = vec![0.0; point[t].len()];
        for i in 0..point[t].len() {
            let orig = point[t][i];
            point[t][i] = orig + FD_STEP;
            let up = loss(point);
            point[t][i] = orig - FD_STEP;
            let down = loss(point);
            point[t][i] = orig;
            grad[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

fn load_params<T: Real>(module: &mut impl Module<T>, values: &[Vec<f64>]) {
    for (p, v) in module.params_mut().into_iter().zip(values) {
        for (dst, src) in p.value.data_mut().iter_mut().zip(v) {
            *dst = T::cast(*src);
        }
    }
}

fn param_values<T: Real>(module: &impl Module<T>) -> Vec<Vec<f64>> {
    module
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn block_loss<T: Real>(
    block: &mut CliffordBlock<T>,
    x: &Tensor<f64>,
    weights: &Tensor<f64>,
    want_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::<T>::new();
    let xv = if want_grads { g.variable(x.cast()) } else { g.constant(x.cast()) };
    // drop-path is disabled, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = block.forward(&mut g, xv, true, &mut rng)?;
    let w = g.constant(weights.cast());
    let prod = g.mul(y, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item().as_f64();
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    block.zero_grad();
    block.pull_grads(&g);
    let mut grads: Vec<Vec<f64>> = block
        .params()
        .iter()
        .map(|p| match &p.grad {
            Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    let gx = g.grad(xv).expect("input requires grad");
    grads.push(gx.data().iter().map(|v| v.as_f64()).collect());
    Ok((value, grads))
}

/// Gradient check of one block (`D = 8`, 4×4 grid, batch 2) with loss
/// `Σ y ⊙ R` for a fixed random `R`, in training mode with drop-path off.
pub fn grad_check_block(cli_mode: CliMode, ctx_mode: CtxMode, beta: u8, seed: u64) -> Result<GradErrors> {
    let dim = 8;
    let config = BlockConfig {
        shifts: ShiftSet::new(vec![1, 2, 4])?,
        cli_mode,
        ctx_mode,
        beta,
        layerscale_init: 1.0,
        drop_path_rate: 0.0,
        local_context: LocalContextKind::Factorized,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block64 = CliffordBlock::<f64>::new("b", dim, &config, 0.0, &mut rng)?;
    randomize_params(&mut block64, &mut rng);
    let mut block32 = CliffordBlock::<f32>::new("b", dim, &config, 0.0, &mut rng)?;
    copy_tensors(&block64, &mut block32);

    let shape = [2, 4, 4, dim];
    let x = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0) as f64);
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..1.0) as f64);

    let (_, analytic64) = block_loss(&mut block64, &x, &weights, true)?;
    let (_, analytic32) = block_loss(&mut block32, &x, &weights, true)?;

    let mut point = param_values(&block64);
    point.push(x.data().to_vec());
    let numeric = numeric_grads(&mut point, |pt| {
        let n = pt.len() - 1;
        load_params(&mut block64, &pt[..n]);
        let xt = Tensor::new(&shape, pt[n].clone()).expect("input shape");
        block_loss(&mut block64, &xt, &weights, false).expect("forward").0
    });
    Ok(GradErrors {
        single: worst_rel_error(&analytic32, &numeric),
        double: worst_rel_error(&analytic64, &numeric),
    })
}

fn model_loss<T: Real>(
    model: &mut CliffordNet<T>,
    images: &Tensor<f64>,
    labels: &[usize],
    want_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::<T>::new();
    let x = g.constant(images.cast());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model.forward(&mut g, x, true, &mut rng)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).item().as_f64();
    if !want_grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    model.zero_grad();
    model.pull_grads(&g);
    let grads = model
        .params()
        .iter()
        .map(|p| match &p.grad {
            Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    Ok((value, grads))
}

/// Gradient check of a two-block model (`D = 8`, 8×8 images, batch 2) under
/// cross-entropy.
pub fn grad_check_model(seed: u64) -> Result<GradErrors> {
    let mut config = ModelConfig::preset("nano-mini")?;
    config.dim = 8;
    config.depth = 2;
    config.image_size = 8;
    config.num_classes = 5;
    config.block.shifts = ShiftSet::new(vec![1, 2, 4])?;
    config.block.drop_path_rate = 0.0;
    config.block.layerscale_init = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model64 = CliffordNet::<f64>::new(&config, &mut rng)?;
    randomize_params(&mut model64, &mut rng);
    let mut model32 = model64.cast::<f32>();
    let images = Tensor::from_fn(&[2, 8, 8, 3], |_| rng.gen_range(-1.0f32..1.0) as f64);
    let labels = [1, 3];

    let (_, analytic64) = model_loss(&mut model64, &images, &labels, true)?;
    let (_, analytic32) = model_loss(&mut model32, &images, &labels, true)?;
    let mut point = param_values(&model64);
    let numeric = numeric_grads(&mut point, |pt| {
        load_params(&mut model64, pt);
        model_loss(&mut model64, &images, &labels, false).expect("forward").0
    });
    Ok(GradErrors {
        single: worst_rel_error(&analytic32, &numeric),
        double: worst_rel_error(&analytic64, &numeric),
    })
}

pub const SINGLE_TOL: f64 = 1e-3;
pub const DOUBLE_TOL: f64 = 1e-6;

/// Block gradient checks over every interaction mode, context mode and β.
pub fn block_gradients(seed: u64) -> Result<(PropertyResult, PropertyResult)> {
    let mut single = 0.0f64;
    let mut double = 0.0f64;
    let mut cases = 0;
    for cli in [CliMode::Inner, CliMode::Wedge, CliMode::Full] {
        for ctx in [CtxMode::Diff, CtxMode::Abs] {
            for beta in [0, 1] {
                let e = grad_check_block(cli, ctx, beta, seed + cases as u64)?;
                single = single.max(e.single);
                double = double.max(e.double);
                cases += 1;
            }
        }
    }
    Ok((
        PropertyResult::new("block-grad-f32", single, SINGLE_TOL, cases),
        PropertyResult::new("block-grad-f64", double, DOUBLE_TOL, cases),
    ))
}

pub fn model_gradients(seed: u64) -> Result<(PropertyResult, PropertyResult)> {
    let e = grad_check_model(seed)?;
    Ok((
        PropertyResult::new("model-grad-f32", e.single, SINGLE_TOL, 1),
        PropertyResult::new("model-grad-f64", e.double, DOUBLE_TOL, 1),
    ))
}

/// The full suite with the given interaction kernel.
pub fn run_suite(kernel: &dyn InteractionKernel) -> Result<Vec<PropertyResult>> {
    let mut out = vec![
        oracle_equivalence(kernel, &[4, 8, 16], 100, 1),
        anti_symmetry(kernel, 1000, 2),
        self_annihilation(kernel, 1000, 3),
        gamma_zero_identity(VARIANTS, 4)?,
    ];
    let (b32, b64) = block_gradients(5)?;
    let (m32, m64) = model_gradients(6)?;
    out.extend([b32, b64, m32, m64]);
    Ok(out)
}

pub fn run_all() -> Result<Vec<PropertyResult>> {
    run_suite(&Rolling)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FlippedWedge;

    impl InteractionKernel for FlippedWedge {
        fn dot(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
            Rolling.dot(h, c, s)
        }

        // second term added instead of subtracted
        fn wedge(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
            let d = h.len();
            (0..d)
                .map(|k| h[k] * c[(k + s) % d] + c[k] * h[(k + s) % d])
                .collect()
        }
    }

    struct BackwardRoll;

    impl InteractionKernel for BackwardRoll {
        fn dot(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
            Rolling.dot(h, c, (h.len() - s % h.len()) % h.len())
        }

        fn wedge(&self, h: &[f32], c: &[f32], s: usize) -> Vec<f32> {
            Rolling.wedge(h, c, (h.len() - s % h.len()) % h.len())
        }
    }

    #[test]
    fn production_kernel_passes_the_algebraic_checks() {
        assert!(oracle_equivalence(&Rolling, &[4, 8], 10, 0).passed);
        assert!(anti_symmetry(&Rolling, 200, 0).passed);
        assert!(self_annihilation(&Rolling, 200, 0).passed);
    }

    #[test]
    fn sign_flip_breaks_anti_symmetry() {
        let r = anti_symmetry(&FlippedWedge, 50, 0);
        assert!(!r.passed);
        assert!(r.max_deviation > 0.0);
        assert!(r.to_string().starts_with("FAIL anti-symmetry"));
    }

    #[test]
    fn wrong_roll_direction_breaks_oracle_equivalence() {
        let r = oracle_equivalence(&BackwardRoll, &[4, 8, 16], 5, 0);
        assert!(!r.passed);
        assert!(r.max_deviation > 1e-3);
        // it is still anti-symmetric, which is why the oracle is needed
        assert!(anti_symmetry(&BackwardRoll, 50, 0).passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(&[1.0, 0.0], &[1.0, 0.0], 1e-9), 0.0);
        assert!((rel_error(&[2.0], &[1.0], 1e-9) - 0.5).abs() < 1e-15);
        assert!(rel_error(&[1e-12], &[0.0], 1e-6) < 1e-5);
    }

    #[test]
    fn single_block_gradient_check() {
        let e = grad_check_block(CliMode::Full, CtxMode::Diff, 1, 0).unwrap();
        assert!(e.single < SINGLE_TOL, "{e:?}");
        assert!(e.double < DOUBLE_TOL, "{e:?}");
    }
}
