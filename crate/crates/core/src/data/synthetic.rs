use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cifar::{write_cifar, CifarVariant, Dataset, Split, CHANNELS, IMAGE_BYTES, SIDE};
use crate::error::Result;

/// Procedural 10-class stand-in for CIFAR-10 when the real archive is not at
/// hand. Class `k` is a stripe pattern at angle `k·18°` over a tint of hue
/// `k·36°`; each image gets random phase, frequency, contrast, colour jitter, a
/// distractor disc and pixel noise, so a model has to read both colour and
/// orientation.
pub fn synthetic(n: usize, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let noise = Normal::new(0.0, 28.0).expect("valid sigma");
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..10usize);
        labels.push(k);
        let tint = hue_rgb(k as f64 * 36.0 + rng.gen_range(-12.0..12.0));
        let angle = k as f64 * PI / 10.0 + rng.gen_range(-0.12..0.12);
        let (sin, cos) = angle.sin_cos();
        let freq = rng.gen_range(0.35..0.7);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(40.0..80.0);
        let base = rng.gen_range(90.0..150.0);
        let disc = (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0), rng.gen_range(3.0..8.0));
        let disc_rgb = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (fx, fy) = (x as f64, y as f64);
                let wave = (freq * (fx * cos + fy * sin) + phase).sin();
                let in_disc = (fx - disc.0).powi(2) + (fy - disc.1).powi(2) < disc.2 * disc.2;
                for c in 0..CHANNELS {
                    let v = if in_disc {
                        disc_rgb[c]
                    } else {
                        base * (0.5 + tint[c]) + contrast * wave
                    };
                    let v = v + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(images, labels, CifarVariant::Cifar10, split).expect("consistent by construction")
}

fn hue_rgb(deg: f64) -> [f64; 3] {
    let h = deg.rem_euclid(360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Writes a synthetic dataset laid out like the CIFAR-10 binary archive
/// (`data_batch_1..5.bin`, `test_batch.bin`).
pub fn write_synthetic_dir(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let data = synthetic(train, seed, Split::Train);
    let files = CifarVariant::Cifar10.files(Split::Train);
    let per = train.div_ceil(files.len());
    for (i, name) in files.iter().enumerate() {
        let lo = (i * per).min(train);
        let hi = ((i + 1) * per).min(train);
        let part = Dataset::new(
            data.images()[lo * IMAGE_BYTES..hi * IMAGE_BYTES].to_vec(),
            data.labels()[lo..hi].to_vec(),
            CifarVariant::Cifar10,
            Split::Train,
        )?;
        write_cifar(dir.join(name), &part)?;
    }
    write_cifar(dir.join("test_batch.bin"), &synthetic(test, seed, Split::Test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar_dir;

    #[test]
    fn deterministic_and_balanced_enough() {
        let a = synthetic(200, 3, Split::Train);
        assert_eq!(a, synthetic(200, 3, Split::Train));
        assert_ne!(a, synthetic(200, 3, Split::Test));
        let mut counts = [0; 10];
        for &l in a.labels() {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 5), "{counts:?}");
    }

    #[test]
    fn directory_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dir(dir.path(), 23, 7, 1).unwrap();
        let train = load_cifar_dir(dir.path(), CifarVariant::Cifar10, Split::Train).unwrap();
        let test = load_cifar_dir(dir.path(), CifarVariant::Cifar10, Split::Test).unwrap();
        assert_eq!(train, synthetic(23, 1, Split::Train));
        assert_eq!(test.len(), 7);
    }
}
