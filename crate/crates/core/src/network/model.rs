use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::CliffordBlock;
use super::config::ModelConfig;
use super::layers::{LayerNorm, Linear, Module, PatchEmbed, Slot, SlotMut};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Images per forward pass inside [`CliffordNet::predict`].
pub const PREDICT_CHUNK: usize = 32;

/// Isotropic backbone: patch embedding, `depth` shape-preserving blocks, then
/// norm → global average pool → linear head.
#[derive(Clone, Debug)]
pub struct CliffordNet<T> {
    pub config: ModelConfig,
    pub embed: PatchEmbed<T>,
    pub embed_norm: LayerNorm<T>,
    pub blocks: Vec<CliffordBlock<T>>,
    pub head_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Real> CliffordNet<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embed = PatchEmbed::new("embed", config.patch_size, config.in_channels, d, rng);
        let embed_norm = LayerNorm::new("embed_norm", d);
        let blocks = (0..config.depth)
            .map(|i| {
                let rate = config.block.drop_path_at(i, config.depth);
                CliffordBlock::new(&format!("blocks.{i}"), d, &config.block, rate, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CliffordNet {
            config: config.clone(),
            embed,
            embed_norm,
            blocks,
            head_norm: LayerNorm::new("head_norm", d),
            head: Linear::new("head", d, config.num_classes, rng),
        })
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `images` is `(B, H, W, C_in)`; returns logits `(B, num_classes)`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        images: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(Error::dims(
                "model_forward",
                &shape,
                &[0, self.config.image_size, self.config.image_size, self.config.in_channels],
            ));
        }
        let x = self.embed.forward(g, images)?;
        let mut x = self.embed_norm.forward(g, x)?;
        for block in &mut self.blocks {
            x = block.forward(g, x, training, rng)?;
        }
        let x = self.head_norm.forward(g, x)?;
        let pooled = g.global_avg_pool(x)?;
        self.head.forward(g, pooled)
    }

    /// Inference on a batch of images; returns logits. Images are processed
    /// [`PREDICT_CHUNK`] at a time and each block runs on a fresh graph, so
    /// memory stays at one block's activations for one chunk.
    pub fn predict(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::dims("predict", &shape, &[0, 0, 0, self.config.in_channels]));
        }
        let per_image = shape[1] * shape[2] * shape[3];
        let mut g = Graph::new();
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = Vec::with_capacity(shape[0] * self.config.num_classes);
        for chunk in images.data().chunks(PREDICT_CHUNK * per_image) {
            let n = chunk.len() / per_image;
            g.reset();
            let x = g.constant(Tensor::new(&[n, shape[1], shape[2], shape[3]], chunk.to_vec())?);
            let x = self.embed.forward(&mut g, x)?;
            let x = self.embed_norm.forward(&mut g, x)?;
            let mut h = g.value(x).clone();
            for block in &mut self.blocks {
                g.reset();
                let x = g.constant(h);
                let y = block.forward(&mut g, x, false, &mut rng)?;
                h = g.value(y).clone();
            }
            g.reset();
            let x = g.constant(h);
            let x = self.head_norm.forward(&mut g, x)?;
            let pooled = g.global_avg_pool(x)?;
            let out = self.head.forward(&mut g, pooled)?;
            logits.extend_from_slice(g.value(out).data());
        }
        Tensor::new(&[shape[0], self.config.num_classes], logits)
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> CliffordNet<U> {
        let mut out = CliffordNet::<U>::seeded(&self.config, 0).expect("config already validated");
        let src = self.named_tensors();
        for ((_, dst), (_, s)) in out.named_tensors_mut().into_iter().zip(src) {
            *dst = s.cast();
        }
        out
    }
}

impl<T: Real> Module<T> for CliffordNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(Slot<'a, T>)) {
        self.embed.visit(f);
        self.embed_norm.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.head_norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(SlotMut<'a, T>)) {
        self.embed.visit_mut(f);
        self.embed_norm.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Builds a named preset with fresh parameters.
pub fn build_variant(name: &str, seed: u64) -> Result<(ModelConfig, CliffordNet<f32>)> {
    let config = ModelConfig::preset(name)?;
    let model = CliffordNet::seeded(&config, seed)?;
    Ok((config, model))
}

pub fn param_count<T: Real>(model: &CliffordNet<T>) -> usize {
    model.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(depth: usize) -> ModelConfig {
        let mut c = ModelConfig::preset("nano-mini").unwrap();
        c.dim = 8;
        c.depth = depth;
        c.image_size = 8;
        c
    }

    #[test]
    fn forward_shapes() {
        let c = tiny(2);
        let mut m = CliffordNet::<f32>::seeded(&c, 0).unwrap();
        let logits = m.predict(Tensor::zeros(&[3, 8, 8, 3])).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
        assert!(m.predict(Tensor::zeros(&[3, 7, 8, 3])).is_err());
        assert!(m.predict(Tensor::zeros(&[3, 8, 8, 1])).is_err());
    }

    #[test]
    fn chunked_predict_matches_one_graph() {
        let c = tiny(2);
        let mut m = CliffordNet::<f32>::seeded(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = PREDICT_CHUNK + 5;
        let images = Tensor::from_fn(&[n, 8, 8, 3], |_| rng.gen_range(-1.0f32..1.0));
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = m.forward(&mut g, x, false, &mut rng).unwrap();
        let whole = g.value(y).clone();
        let chunked = m.predict(images).unwrap();
        assert!(whole.max_abs_diff(&chunked) < 1e-5, "{}", whole.max_abs_diff(&chunked));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let m = CliffordNet::<f32>::seeded(&tiny(2), 0).unwrap();
        let names: Vec<&str> = m.named_tensors().iter().map(|(n, _)| *n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "embed.weight");
        assert_eq!(*names.last().unwrap(), "head.bias");
        assert!(names.contains(&"blocks.1.context.bn2.running_var"));
    }

    #[test]
    fn cast_preserves_values() {
        let m = CliffordNet::<f32>::seeded(&tiny(1), 5).unwrap();
        let m64: CliffordNet<f64> = m.cast();
        for ((na, a), (nb, b)) in m.named_tensors().iter().zip(m64.named_tensors()) {
            assert_eq!(*na, nb);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f64, *y);
            }
        }
    }

    #[test]
    fn weight_decay_groups() {
        let m = CliffordNet::<f32>::seeded(&tiny(1), 0).unwrap();
        for p in m.params() {
            let n = p.name();
            let expect = n.ends_with(".weight") || n.ends_with(".kernel");
            assert_eq!(p.decays(), expect, "{n}");
        }
    }
}
