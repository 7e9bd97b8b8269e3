//! Desk-scale trainable segmentation model: a logistic pixel classifier
//! over four fixed per-pixel features, trained by seeded mini-batch
//! gradient descent on binary cross-entropy or soft Dice.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{box_blur, gradient_magnitude, Image, ImageError};
use crate::metrics::dice_score;

pub const FEATURES: usize = 4;
pub const BATCH_SIZE: usize = 1024;
pub const DICE_EPSILON: f64 = 1.0;
/// Predicted probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` so
/// they remain strictly inside (0, 1) after `f32` storage.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Bce,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// intensity, 3x3 box mean, 7x7 box mean, gradient magnitude
    #[default]
    Linear,
    /// intensity, intensity squared, 3x3 mean times 7x7 mean, squared gradient
    QuadraticFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub criterion: Criterion,
    #[serde(default)]
    pub model_variant: ModelVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub learning_rate: f64,
    pub criterion: Criterion,
}

/// The serialized model blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelClassifier {
    pub weights: [f64; FEATURES],
    pub bias: f64,
    pub variant: ModelVariant,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("image and label shapes differ for item {0}")]
    ShapeMismatch(usize),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("epochs must be at least 1 and the learning rate positive")]
    InvalidHyperParams,
    #[error("block size {block} exceeds image extent")]
    BlockLargerThanImage { block: usize },
    #[error("block and stride must be at least 1")]
    InvalidWindow,
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Feature = [f64; FEATURES];

/// Per-pixel feature vectors of a 2D grayscale image.
pub fn features(img: &Image, variant: ModelVariant) -> Result<Vec<Feature>, ImageError> {
    img.dims2()?;
    let b3 = box_blur(img, 1)?;
    let b7 = box_blur(img, 3)?;
    let g = gradient_magnitude(img)?;
    Ok((0..img.len())
        .map(|i| {
            let v = img.data[i];
            match variant {
                ModelVariant::Linear => [v, b3.data[i], b7.data[i], g.data[i]],
                ModelVariant::QuadraticFeatures => {
                    [v, v * v, b3.data[i] * b7.data[i], g.data[i] * g.data[i]]
                }
            }
        })
        .collect())
}

fn logit(w: &Feature, b: f64, f: &Feature) -> f64 {
    w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3] * f[3] + b
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn soft_dice_loss(prob: &[f64], labels: &[f64]) -> f64 {
    let inter: f64 = prob.iter().zip(labels).map(|(p, g)| p * g).sum();
    let denom = prob.iter().sum::<f64>() + labels.iter().sum::<f64>() + DICE_EPSILON;
    1.0 - (2.0 * inter + DICE_EPSILON) / denom
}

/// Loss of the model `(weights, bias)` over a batch together with its
/// analytic gradient `(d/dw, d/db)`.
pub fn loss_and_gradient(
    weights: &Feature,
    bias: f64,
    feats: &[Feature],
    labels: &[f64],
    criterion: Criterion,
) -> (f64, Feature, f64) {
    let n = feats.len().max(1) as f64;
    let z: Vec<f64> = feats.iter().map(|f| logit(weights, bias, f)).collect();
    let mut gw = [0.0; FEATURES];
    let mut gb = 0.0;
    let loss = match criterion {
        Criterion::Bce => {
            let mut loss = 0.0;
            for ((zi, f), &g) in z.iter().zip(feats).zip(labels) {
                loss += softplus(*zi) - g * zi;
                let dz = (sigmoid(*zi) - g) / n;
                for k in 0..FEATURES {
                    gw[k] += dz * f[k];
                }
                gb += dz;
            }
            loss / n
        }
        Criterion::Dice => {
            let p: Vec<f64> = z.iter().map(|&zi| sigmoid(zi)).collect();
            let inter: f64 = p.iter().zip(labels).map(|(p, g)| p * g).sum();
            let s = p.iter().sum::<f64>() + labels.iter().sum::<f64>() + DICE_EPSILON;
            let num = 2.0 * inter + DICE_EPSILON;
            for ((pi, f), &g) in p.iter().zip(feats).zip(labels) {
                let dp = -(2.0 * g * s - num) / (s * s);
                let dz = dp * pi * (1.0 - pi);
                for k in 0..FEATURES {
                    gw[k] += dz * f[k];
                }
                gb += dz;
            }
            1.0 - num / s
        }
    };
    (loss, gw, gb)
}

/// Trains on `(image, label mask)` pairs. Each epoch visits every pixel
/// once in seeded shuffled mini-batches of [`BATCH_SIZE`]; the returned
/// curve holds the full-data loss after each epoch.
pub fn train(
    samples: &[(Image, Image)],
    hp: &HyperParams,
    seed: u64,
) -> Result<(PixelClassifier, Vec<f64>), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if hp.epochs == 0 || !(hp.learning_rate > 0.0) {
        return Err(ModelError::InvalidHyperParams);
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, (img, label)) in samples.iter().enumerate() {
        if img.shape != label.shape {
            return Err(ModelError::ShapeMismatch(i));
        }
        feats.extend(features(img, hp.model_variant)?);
        labels.extend(label.data.iter().map(|&v| f64::from(u8::from(v != 0.0))));
    }
    if feats.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut weights = [0.0; FEATURES];
    let mut bias = 0.0;
    let mut curve = Vec::with_capacity(hp.epochs as usize);
    let mut batch_f = Vec::with_capacity(BATCH_SIZE);
    let mut batch_l = Vec::with_capacity(BATCH_SIZE);
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH_SIZE) {
            batch_f.clear();
            batch_l.clear();
            batch_f.extend(chunk.iter().map(|&i| feats[i]));
            batch_l.extend(chunk.iter().map(|&i| labels[i]));
            let (_, gw, gb) = loss_and_gradient(&weights, bias, &batch_f, &batch_l, hp.criterion);
            for k in 0..FEATURES {
                weights[k] -= hp.learning_rate * gw[k];
            }
            bias -= hp.learning_rate * gb;
        }
        curve.push(loss_and_gradient(&weights, bias, &feats, &labels, hp.criterion).0);
    }
    let model = PixelClassifier {
        weights,
        bias,
        variant: hp.model_variant,
        meta: TrainingMeta {
            epochs: hp.epochs,
            learning_rate: hp.learning_rate,
            criterion: hp.criterion,
        },
    };
    Ok((model, curve))
}

/// Per-pixel foreground probability map.
pub fn predict(model: &PixelClassifier, img: &Image) -> Result<Image, ModelError> {
    let feats = features(img, model.variant)?;
    let data = feats
        .iter()
        .map(|f| sigmoid(logit(&model.weights, model.bias, f)).clamp(PROB_EPS, 1.0 - PROB_EPS))
        .collect();
    Ok(Image::new(img.shape.clone(), data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OcclusionScorer {
    MeanProb,
    /// Dice of the 0.5-thresholded prediction against a reference mask.
    DiceVs(Image),
}

impl OcclusionScorer {
    fn score(&self, prob: &Image) -> Result<f64, ModelError> {
        match self {
            OcclusionScorer::MeanProb => Ok(prob.mean()),
            OcclusionScorer::DiceVs(gt) => {
                let pred = prob.map(|p| f64::from(u8::from(p >= 0.5)));
                dice_score(&pred, gt).map_err(|_| ModelError::Image(ImageError::ShapeMismatch))
            }
        }
    }
}

/// Slides a `block x block` patch filled with the image mean over the image
/// with the given stride. Each heat value is the base score minus the score
/// with that window occluded; the heatmap has one cell per window position.
pub fn occlusion_sensitivity(
    model: &PixelClassifier,
    img: &Image,
    block: usize,
    stride: usize,
    scorer: &OcclusionScorer,
) -> Result<Image, ModelError> {
    let (h, w) = img.dims2()?;
    if block == 0 || stride == 0 {
        return Err(ModelError::InvalidWindow);
    }
    if block > h || block > w {
        return Err(ModelError::BlockLargerThanImage { block });
    }
    let fill = img.mean();
    let base = scorer.score(&predict(model, img)?)?;
    let (gh, gw) = ((h - block) / stride + 1, (w - block) / stride + 1);
    let mut heat = vec![0.0; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut occluded = img.clone();
            for y in gy * stride..gy * stride + block {
                for x in gx * stride..gx * stride + block {
                    occluded.data[y * w + x] = fill;
                }
            }
            heat[gy * gw + gx] = base - scorer.score(&predict(model, &occluded)?)?;
        }
    }
    Ok(Image::new(vec![gh, gw], heat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice_score;
    use rand::Rng;

    fn separable_fixture() -> Vec<(Image, Image)> {
        (0..8)
            .map(|k| {
                let data: Vec<f64> = (0..32 * 32)
                    .map(|i| {
                        let (y, x) = (i / 32, i % 32);
                        let cy = 8 + 2 * k;
                        f64::from(u8::from((y as i64 - cy as i64).abs() < 5 && x > 6 && x < 20))
                    })
                    .collect();
                let img = Image::new(vec![32, 32], data).unwrap();
                (img.clone(), img)
            })
            .collect()
    }

    #[test]
    fn separable_fixture_trains_to_high_dice() {
        let hp = HyperParams {
            epochs: 50,
            learning_rate: 0.1,
            criterion: Criterion::Bce,
            model_variant: ModelVariant::Linear,
        };
        let fixture = separable_fixture();
        let (model, curve) = train(&fixture, &hp, 7).unwrap();
        assert_eq!(curve.len(), 50);
        for (img, label) in &fixture {
            let pred = predict(&model, img).unwrap().map(|p| f64::from(u8::from(p >= 0.5)));
            // Oracle: the intensity threshold 0.5 recovers the label exactly.
            let oracle = img.map(|v| f64::from(u8::from(v >= 0.5)));
            assert_eq!(dice_score(&oracle, label).unwrap(), 1.0);
            assert!(dice_score(&pred, label).unwrap() >= 0.99);
        }
        let non_increasing = curve.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing as f64 >= 0.95 * (curve.len() - 1) as f64);
    }

    #[test]
    fn perfect_soft_dice_is_near_zero() {
        let g: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let sum_g: f64 = g.iter().sum();
        let loss = soft_dice_loss(&g, &g);
        assert!(loss.abs() <= 2.0 * DICE_EPSILON / (2.0 * sum_g + DICE_EPSILON));
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for state in 0..10 {
            let criterion = if state % 2 == 0 { Criterion::Bce } else { Criterion::Dice };
            let feats: Vec<Feature> = (0..64)
                .map(|_| [0; 4].map(|_| rng.random_range(-1.0..1.0)))
                .collect();
            let labels: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
            let w: Feature = [0; 4].map(|_| rng.random_range(-2.0..2.0));
            let b = rng.random_range(-1.0..1.0);
            let (_, gw, gb) = loss_and_gradient(&w, b, &feats, &labels, criterion);
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            for k in 0..FEATURES {
                let (mut wp, mut wm) = (w, w);
                wp[k] += h;
                wm[k] -= h;
                let num = (loss_and_gradient(&wp, b, &feats, &labels, criterion).0
                    - loss_and_gradient(&wm, b, &feats, &labels, criterion).0)
                    / (2.0 * h);
                assert!(rel(gw[k], num) <= 1e-4, "state {state} w{k}: {} vs {num}", gw[k]);
            }
            let num = (loss_and_gradient(&w, b + h, &feats, &labels, criterion).0
                - loss_and_gradient(&w, b - h, &feats, &labels, criterion).0)
                / (2.0 * h);
            assert!(rel(gb, num) <= 1e-4);
        }
    }

    fn blank_model(bias: f64) -> PixelClassifier {
        PixelClassifier {
            weights: [0.0; 4],
            bias,
            variant: ModelVariant::Linear,
            meta: TrainingMeta {
                epochs: 1,
                learning_rate: 0.1,
                criterion: Criterion::Bce,
            },
        }
    }

    #[test]
    fn prediction_edge_cases() {
        let img = Image::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert!(predict(&blank_model(0.0), &img).unwrap().data.iter().all(|&p| p == 0.5));
        let sat = predict(&blank_model(50.0), &img).unwrap();
        assert!(sat.data.iter().all(|&p| p > 0.999 && p < 1.0));
        let m = PixelClassifier {
            weights: [0.3, -0.2, 0.1, 0.5],
            ..blank_model(-0.1)
        };
        assert_eq!(predict(&m, &img).unwrap(), predict(&m, &img).unwrap());
    }

    #[test]
    fn training_errors() {
        let hp = HyperParams {
            epochs: 1,
            learning_rate: 0.1,
            criterion: Criterion::Bce,
            model_variant: ModelVariant::Linear,
        };
        assert_eq!(train(&[], &hp, 0), Err(ModelError::EmptyDataset));
        let a = Image::filled(vec![2, 2], 0.0);
        let b = Image::filled(vec![2, 3], 0.0);
        assert_eq!(train(&[(a, b)], &hp, 0), Err(ModelError::ShapeMismatch(0)));
    }

    #[test]
    fn occlusion_of_constant_image_is_flat() {
        let img = Image::filled(vec![8, 8], 0.4);
        let m = PixelClassifier {
            weights: [2.0, 1.0, 1.0, 3.0],
            ..blank_model(-1.0)
        };
        let heat = occlusion_sensitivity(&m, &img, 4, 4, &OcclusionScorer::MeanProb).unwrap();
        assert_eq!(heat.shape, vec![2, 2]);
        assert!(heat.data.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(
            occlusion_sensitivity(&m, &img, 9, 1, &OcclusionScorer::MeanProb),
            Err(ModelError::BlockLargerThanImage { block: 9 })
        );
    }

    #[test]
    fn occlusion_peaks_over_the_pixel_the_model_reads() {
        // Only intensity matters; a single bright pixel at (5, 2).
        let mut img = Image::filled(vec![8, 8], 0.0);
        img.data[5 * 8 + 2] = 1.0;
        let m = PixelClassifier {
            weights: [8.0, 0.0, 0.0, 0.0],
            ..blank_model(-4.0)
        };
        let heat = occlusion_sensitivity(&m, &img, 2, 1, &OcclusionScorer::MeanProb).unwrap();
        let (gh, gw) = (heat.shape[0], heat.shape[1]);
        let max = heat.data.iter().cloned().fold(f64::MIN, f64::max);
        for gy in 0..gh {
            for gx in 0..gw {
                let covers = (gy..gy + 2).contains(&5) && (gx..gx + 2).contains(&2);
                let v = heat.data[gy * gw + gx];
                if covers {
                    assert!((v - max).abs() < 1e-12 && v > 0.01);
                } else {
                    assert!(v <= 0.0 && v.abs() < 1e-3);
                }
            }
        }
    }
}
