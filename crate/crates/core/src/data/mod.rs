//! CIFAR binary ingestion, normalization, augmentation and deterministic
//! batch iteration.

mod augment;
mod cifar;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, hflip, pad_crop, AugmentConfig};
pub use cifar::{
    load_cifar, load_cifar_dir, write_cifar, CifarVariant, Dataset, Split, CHANNELS, IMAGE_BYTES,
    SIDE,
};
pub use synthetic::{synthetic, write_synthetic_dir};

use crate::tensor::{Real, Tensor};

/// `(x / 255 − mean_c) / std_c` per channel; returns `(N, 32, 32, 3)`.
pub fn normalize<T: Real>(images: &[u8], variant: CifarVariant) -> Tensor<T> {
    let n = images.len() / IMAGE_BYTES;
    let mean = variant.mean();
    let std = variant.std();
    let table: Vec<[T; 256]> = (0..CHANNELS)
        .map(|c| std::array::from_fn(|v| T::cast((v as f64 / 255.0 - mean[c]) / std[c])))
        .collect();
    let data = images
        .iter()
        .enumerate()
        .map(|(i, &v)| table[i % CHANNELS][v as usize])
        .collect();
    Tensor::new(&[n, SIDE, SIDE, CHANNELS], data).expect("whole images")
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over normalized batches; the final batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<AugmentConfig>,
    epoch: usize,
}

impl<'a> Batches<'a> {
    /// Applies `config` to every training image, drawing from a generator keyed
    /// by `(config.seed, epoch, sample index)`.
    pub fn augmented(mut self, config: AugmentConfig) -> Self {
        self.augment = Some(config);
        self
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_batch<T: Real>(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut bytes = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in &indices {
            match &self.augment {
                Some(cfg) => {
                    let mut rng = cfg.rng_for(self.epoch, i);
                    bytes.extend(augment(self.dataset.image(i), cfg, &mut rng));
                }
                None => bytes.extend_from_slice(self.dataset.image(i)),
            }
        }
        let labels = indices.iter().map(|&i| self.dataset.labels()[i]).collect();
        Some(Batch {
            images: normalize(&bytes, self.dataset.variant),
            labels,
            indices,
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch<f32>;

    fn next(&mut self) -> Option<Batch<f32>> {
        self.next_batch()
    }
}

/// Shuffled batches for `epoch`. Every sample appears exactly once.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be positive");
    Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        pos: 0,
        batch_size,
        augment: None,
        epoch,
    }
}

/// Batches in storage order, for evaluation.
pub fn sequential(dataset: &Dataset, batch_size: usize) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be positive");
    Batches {
        dataset,
        order: (0..dataset.len()).collect(),
        pos: 0,
        batch_size,
        augment: None,
        epoch: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        let images = (0..n * IMAGE_BYTES).map(|i| (i % 256) as u8).collect();
        let labels = (0..n).map(|i| i % 10).collect();
        Dataset::new(images, labels, CifarVariant::Cifar10, Split::Train).unwrap()
    }

    #[test]
    fn normalize_centres_the_mean_pixel() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let mean = variant.mean();
            let std = variant.std();
            let mut img = vec![0u8; IMAGE_BYTES];
            img[0] = (255.0 * mean[0]).round() as u8;
            let t = normalize::<f64>(&img, variant);
            assert!(t.data()[0].abs() < 0.5 / 255.0 / std[0] + 1e-12);
            for c in 1..3 {
                assert!((t.data()[c] + mean[c] / std[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_sizes_cover_everything_once() {
        let d = dataset(100);
        let sizes: Vec<usize> = batches(&d, 32, 5, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let mut seen: Vec<usize> = batches(&d, 32, 5, 0).flat_map(|b| b.indices).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn order_depends_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(50, 1, 2), epoch_order(50, 1, 2));
        assert_ne!(epoch_order(50, 1, 2), epoch_order(50, 1, 3));
        assert_ne!(epoch_order(50, 1, 2), epoch_order(50, 2, 2));
    }

    #[test]
    fn batch_labels_follow_indices() {
        let d = dataset(20);
        for b in batches(&d, 8, 0, 1) {
            assert_eq!(b.images.shape()[1..], [32, 32, 3]);
            for (l, i) in b.labels.iter().zip(&b.indices) {
                assert_eq!(*l, i % 10);
            }
        }
    }

    #[test]
    fn augmented_batches_are_reproducible() {
        let d = dataset(10);
        let cfg = AugmentConfig::default();
        let a: Vec<f32> = batches(&d, 4, 0, 0)
            .augmented(cfg.clone())
            .flat_map(|b| b.images.into_data())
            .collect();
        let b: Vec<f32> = batches(&d, 4, 0, 0)
            .augmented(cfg)
            .flat_map(|b| b.images.into_data())
            .collect();
        assert_eq!(a, b);
    }
}
