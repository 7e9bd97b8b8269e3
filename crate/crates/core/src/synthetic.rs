//! Seeded synthetic segmentation data: Gaussian blobs on a dim background.
//!
//! Each item is a 128x128 image with 3..=8 blobs (sigma in 4..10, peak 1.0)
//! over a 0.1 background plus N(0, 0.05^2) noise. Blobs combine by maximum
//! and the result is clamped to `[0, 1.1 + 5 * 0.05]`. A pixel belongs to a
//! blob's support when that blob contributes at least [`SUPPORT_LEVEL`];
//! the instance map assigns each support pixel to its strongest blob.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::stain::{rgb_from_optical_density, StainMatrix};

pub const SIZE: usize = 128;
pub const BACKGROUND: f64 = 0.1;
pub const NOISE_SIGMA: f64 = 0.05;
pub const SUPPORT_LEVEL: f64 = 0.5;
/// Background plus peak plus five noise sigmas.
pub const MAX_INTENSITY: f64 = 1.35;
/// Eosin concentration of the stroma in the H&E rendering.
const EOSIN_LEVEL: f64 = 0.3;
/// Hematoxylin concentration per unit of grayscale intensity.
const HEMATOXYLIN_GAIN: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Grayscale `f32` image.
    Blobs2d,
    /// The same scene rendered as an 8-bit H&E-stained RGB image.
    Blobs2dHe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    /// `[128, 128]` grayscale, or `[128, 128, 3]` RGB for the H&E kind.
    pub image: Image,
    /// Union of blob supports (0/1).
    pub mask: Image,
    /// Instance labels, 0 = background.
    pub instances: Image,
}

pub fn generate(kind: SyntheticKind, n_items: usize, seed: u64) -> Vec<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items).map(|_| generate_item(kind, &mut rng)).collect()
}

fn generate_item(kind: SyntheticKind, rng: &mut ChaCha8Rng) -> SyntheticItem {
    let n_blobs = rng.random_range(3..=8);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let sigma = rng.random_range(4.0..10.0);
            let cy = rng.random_range(sigma..SIZE as f64 - sigma);
            let cx = rng.random_range(sigma..SIZE as f64 - sigma);
            (cy, cx, sigma)
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let n = SIZE * SIZE;
    let (mut gray, mut mask, mut inst) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (y, x) = ((p / SIZE) as f64, (p % SIZE) as f64);
        let mut best = (0.0, 0usize);
        for (k, &(cy, cx, s)) in blobs.iter().enumerate() {
            let r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            let v = libm::exp(-r2 / (2.0 * s * s));
            if v > best.0 {
                best = (v, k + 1);
            }
        }
        gray[p] = (BACKGROUND + best.0 + noise.sample(rng)).clamp(0.0, MAX_INTENSITY);
        if best.0 >= SUPPORT_LEVEL {
            mask[p] = 1.0;
            inst[p] = best.1 as f64;
        }
    }
    let shape = vec![SIZE, SIZE];
    let image = match kind {
        SyntheticKind::Blobs2d => Image {
            shape: shape.clone(),
            data: gray,
        },
        SyntheticKind::Blobs2dHe => {
            let stains = StainMatrix::default();
            let data = gray
                .iter()
                .flat_map(|&g| {
                    let od = stains.optical_density(HEMATOXYLIN_GAIN * g, EOSIN_LEVEL);
                    rgb_from_optical_density(od).map(|v| libm::round(v).clamp(0.0, 255.0))
                })
                .collect();
            Image {
                shape: vec![SIZE, SIZE, 3],
                data,
            }
        }
    };
    SyntheticItem {
        image,
        mask: Image {
            shape: shape.clone(),
            data: mask,
        },
        instances: Image { shape, data: inst },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(SyntheticKind::Blobs2d, 3, 7), generate(SyntheticKind::Blobs2d, 3, 7));
        assert_ne!(generate(SyntheticKind::Blobs2d, 1, 7), generate(SyntheticKind::Blobs2d, 1, 8));
    }

    #[test]
    fn every_label_is_nonempty() {
        for item in generate(SyntheticKind::Blobs2d, 20, 7) {
            assert!(item.mask.data.iter().any(|&v| v == 1.0));
            assert!(item.instances.data.iter().zip(&item.mask.data).all(|(&i, &m)| (i > 0.0) == (m > 0.0)));
        }
    }

    #[test]
    fn intensity_range_is_bounded() {
        for seed in 0..1000 {
            let item = &generate(SyntheticKind::Blobs2d, 1, seed)[0];
            let (lo, hi) = item.image.min_max().unwrap();
            assert!(lo >= 0.0 && hi <= 1.35, "seed {seed}: [{lo}, {hi}]");
        }
    }

    #[test]
    fn stained_rendering_is_rgb_u8() {
        let item = &generate(SyntheticKind::Blobs2dHe, 1, 3)[0];
        assert_eq!(item.image.shape, vec![SIZE, SIZE, 3]);
        assert!(item.image.data.iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }
}
