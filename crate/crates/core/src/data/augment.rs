use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cifar::{CHANNELS, IMAGE_BYTES, SIDE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad_crop: usize,
    pub hflip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad_crop: 4,
            hflip_prob: 0.5,
            erase_prob: 0.25,
            erase_area: [0.02, 0.33],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: every image passes through unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            pad_crop: 0,
            hflip_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.erase_area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "erase_area {:?} must satisfy 0 < lo <= hi < 1",
                self.erase_area
            )));
        }
        if self.pad_crop >= SIDE {
            return Err(Error::Config(format!("pad_crop {} is too large", self.pad_crop)));
        }
        Ok(())
    }

    /// Generator for one sample of one epoch.
    pub fn rng_for(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6175_676d_656e_7400);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        rng
    }
}

fn reflect(i: isize, n: isize) -> usize {
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflect-pads by `pad` and crops a 32×32 window whose top-left corner sits
/// at `(dy, dx)` in padded coordinates.
pub fn pad_crop(image: &[u8], pad: usize, dy: usize, dx: usize) -> Vec<u8> {
    let n = SIDE as isize;
    let mut out = vec![0u8; IMAGE_BYTES];
    for y in 0..SIDE {
        let sy = reflect(y as isize + dy as isize - pad as isize, n);
        for x in 0..SIDE {
            let sx = reflect(x as isize + dx as isize - pad as isize, n);
            let src = (sy * SIDE + sx) * CHANNELS;
            let dst = (y * SIDE + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&image[src..src + CHANNELS]);
        }
    }
    out
}

pub fn hflip(image: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; IMAGE_BYTES];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let src = (y * SIDE + SIDE - 1 - x) * CHANNELS;
            let dst = (y * SIDE + x) * CHANNELS;
            out[dst..dst + CHANNELS].copy_from_slice(&image[src..src + CHANNELS]);
        }
    }
    out
}

/// Overwrites a random rectangle covering `area` of the image (aspect ratio
/// log-uniform in [0.3, 3.3]) with uniform byte noise.
fn erase(image: &mut [u8], area: [f64; 2], rng: &mut impl Rng) {
    let total = (SIDE * SIDE) as f64;
    for _ in 0..10 {
        let target = rng.gen_range(area[0]..=area[1]) * total;
        let aspect = rng.gen_range(0.3f64.ln()..=3.3f64.ln()).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= SIDE || w >= SIDE {
            continue;
        }
        let top = rng.gen_range(0..=SIDE - h);
        let left = rng.gen_range(0..=SIDE - w);
        for y in top..top + h {
            let row = &mut image[(y * SIDE + left) * CHANNELS..(y * SIDE + left + w) * CHANNELS];
            rng.fill(row);
        }
        return;
    }
}

/// Pad-crop, horizontal flip and random erasing, in that order.
pub fn augment(image: &[u8], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<u8> {
    let pad = config.pad_crop;
    let mut out = if pad > 0 {
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        pad_crop(image, pad, dy, dx)
    } else {
        image.to_vec()
    };
    if rng.gen_bool(config.hflip_prob) {
        out = hflip(&out);
    }
    if rng.gen_bool(config.erase_prob) {
        erase(&mut out, config.erase_area, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Vec<u8> {
        (0..IMAGE_BYTES).map(|i| (i * 7 % 256) as u8).collect()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = image();
        let cfg = AugmentConfig::identity();
        cfg.validate().unwrap();
        let mut rng = cfg.rng_for(0, 0);
        assert_eq!(augment(&img, &cfg, &mut rng), img);
        assert_eq!(pad_crop(&img, 4, 4, 4), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image();
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn crop_uses_reflection() {
        let img = image();
        let out = pad_crop(&img, 4, 0, 0);
        // output (0,0) maps to source (4,4) mirrored about the border
        let src = (4 * SIDE + 4) * CHANNELS;
        assert_eq!(&out[..3], &img[src..src + 3]);
        let shifted = pad_crop(&img, 4, 4, 5);
        assert_eq!(&shifted[..3], &img[3..6]);
    }

    #[test]
    fn fixed_seed_is_deterministic_and_shape_preserving() {
        let img = image();
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&img, &cfg, &mut cfg.rng_for(3, 17));
        let b = augment(&img, &cfg, &mut cfg.rng_for(3, 17));
        let c = augment(&img, &cfg, &mut cfg.rng_for(4, 17));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), IMAGE_BYTES);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = AugmentConfig {
            hflip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            erase_area: [0.0, 0.3],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
