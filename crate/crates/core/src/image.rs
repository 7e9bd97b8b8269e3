//! Row-major `f64` rasters and the pre/post-processing kernels that operate
//! on them: window/level rescale, z-score, resampling, Otsu masking,
//! connected components and geometric/noise augmentation.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorData, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("window width must be positive")]
    NonPositiveWidth,
    #[error("resample factors must be positive")]
    NonPositiveFactor,
    #[error("expected {expected} resample factors, got {actual}")]
    FactorArity { expected: usize, actual: usize },
    #[error("crop window exceeds image bounds")]
    CropOutOfBounds,
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error("image is empty")]
    Empty,
    #[error("operation needs a 2D image")]
    NotTwoDimensional,
    #[error("axis {0} out of range")]
    AxisOutOfRange(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An N-dimensional raster of `f64` samples in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Image, ImageError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ImageError::ShapeMismatch);
        }
        Ok(Image { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Image {
        let n = shape.iter().product();
        Image {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Image {
        Image {
            shape: t.shape.clone(),
            data: t.to_f64_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn dims2(&self) -> Result<(usize, usize), ImageError> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            _ => Err(ImageError::NotTwoDimensional),
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width() + x]
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.data.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::new(
            self.shape.clone(),
            TensorData::F32(self.data.iter().map(|&v| v as f32).collect()),
        )
    }

    /// Encodes nonzero samples as 1 in a `u8` tensor.
    pub fn to_mask_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::new(
            self.shape.clone(),
            TensorData::U8(self.data.iter().map(|&v| u8::from(v != 0.0)).collect()),
        )
    }

    pub fn to_label_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::new(
            self.shape.clone(),
            TensorData::I64(self.data.iter().map(|&v| v as i64).collect()),
        )
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Clamps intensities to `[level - width/2, level + width/2]` and maps that
/// window linearly onto `[0, 1]`.
pub fn window_level_rescale(img: &Image, width: f64, level: f64) -> Result<Image, ImageError> {
    if !(width > 0.0) {
        return Err(ImageError::NonPositiveWidth);
    }
    let low = level - width / 2.0;
    Ok(img.map(|v| ((v - low) / width).clamp(0.0, 1.0)))
}

/// Zero mean, unit population standard deviation. A constant image maps to
/// all zeros.
pub fn zscore_normalize(img: &Image) -> Image {
    let mu = img.mean();
    let n = img.len().max(1) as f64;
    let var = img.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    if sd == 0.0 {
        return img.map(|_| 0.0);
    }
    img.map(|v| (v - mu) / sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Nearest,
    Linear,
}

/// Per-axis resampling. Output extent is `round(dim * factor)` (at least 1);
/// output index `i` samples the source coordinate `(i + 0.5) / factor - 0.5`
/// with edge clamping.
pub fn resample(img: &Image, factors: &[f64], mode: ResampleMode) -> Result<Image, ImageError> {
    if factors.len() != img.shape.len() {
        return Err(ImageError::FactorArity {
            expected: img.shape.len(),
            actual: factors.len(),
        });
    }
    if factors.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(ImageError::NonPositiveFactor);
    }
    let mut cur = img.clone();
    for (axis, &f) in factors.iter().enumerate() {
        if f == 1.0 {
            continue;
        }
        cur = resample_axis(&cur, axis, f, mode);
    }
    Ok(cur)
}

fn resample_axis(img: &Image, axis: usize, factor: f64, mode: ResampleMode) -> Image {
    let n_in = img.shape[axis];
    let n_out = (libm::round(n_in as f64 * factor) as usize).max(1);
    let mut out_shape = img.shape.clone();
    out_shape[axis] = n_out;
    let outer: usize = img.shape[..axis].iter().product();
    let inner: usize = img.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; out_shape.iter().product()];
    let last = (n_in - 1) as f64;
    for o in 0..outer {
        let src_block = &img.data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst_block = &mut data[o * n_out * inner..(o + 1) * n_out * inner];
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) / factor - 0.5).clamp(0.0, last);
            for k in 0..inner {
                let get = |j: usize| src_block[j * inner + k];
                dst_block[i * inner + k] = match mode {
                    ResampleMode::Nearest => get(libm::round(src) as usize),
                    ResampleMode::Linear => {
                        let j0 = libm::floor(src) as usize;
                        let j1 = (j0 + 1).min(n_in - 1);
                        let t = src - j0 as f64;
                        get(j0) * (1.0 - t) + get(j1) * t
                    }
                };
            }
        }
    }
    Image {
        shape: out_shape,
        data,
    }
}

/// Result of an Otsu search over a 256-bin histogram spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub lo: f64,
    pub hi: f64,
    /// Last bin of the background class.
    pub bin: usize,
}

pub const HISTOGRAM_BINS: usize = 256;

impl OtsuSplit {
    pub fn bin_of(&self, v: f64) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo) * HISTOGRAM_BINS as f64;
        (libm::floor(t).max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn is_foreground(&self, v: f64) -> bool {
        self.bin_of(v) > self.bin
    }

    pub fn threshold(&self) -> f64 {
        self.lo + (self.bin + 1) as f64 * (self.hi - self.lo) / HISTOGRAM_BINS as f64
    }
}

/// Maximizes between-class variance over bin boundaries. Among equally good
/// boundaries the middle of the first maximal run is chosen. `None` when the
/// range is empty or all samples share one bin.
pub fn otsu_threshold(values: &[f64], lo: f64, hi: f64) -> Option<OtsuSplit> {
    if !(hi > lo) {
        return None;
    }
    let probe = OtsuSplit { lo, hi, bin: 0 };
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &v in values {
        hist[probe.bin_of(v)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: f64 = hist.iter().enumerate().map(|(b, &c)| b as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut run_open = false;
    for k in 0..HISTOGRAM_BINS - 1 {
        w0 += hist[k];
        sum0 += k as f64 * hist[k] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            run_open = false;
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (total_sum - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        match best {
            Some((b, start, _)) if var == b && run_open => best = Some((b, start, k)),
            Some((b, _, _)) if var <= b => run_open = false,
            _ => {
                best = Some((var, k, k));
                run_open = true;
            }
        }
    }
    best.map(|(_, start, end)| OtsuSplit {
        lo,
        hi,
        bin: (start + end) / 2,
    })
}

/// 4-connected component labelling of the nonzero pixels of a 2D image.
/// Labels are `1..=count` in raster order of each component's first pixel.
pub fn label_components(mask: &Image) -> Result<(Vec<u32>, u32), ImageError> {
    let (h, w) = mask.dims2()?;
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data[q] != 0.0 && labels[q] == 0 {
                    labels[q] = count;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    Ok((labels, count))
}

/// Label map image (0 = background) from a binary mask.
pub fn label_map(mask: &Image) -> Result<Image, ImageError> {
    let (labels, _) = label_components(mask)?;
    Ok(Image {
        shape: mask.shape.clone(),
        data: labels.into_iter().map(f64::from).collect(),
    })
}

fn component_sizes(labels: &[u32], count: u32) -> Vec<usize> {
    let mut sizes = vec![0usize; count as usize + 1];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    sizes
}

/// Keeps only the largest 4-connected component (lowest label on ties).
pub fn largest_component(mask: &Image) -> Result<Image, ImageError> {
    let (labels, count) = label_components(mask)?;
    if count == 0 {
        return Ok(mask.map(|_| 0.0));
    }
    let sizes = component_sizes(&labels, count);
    let keep = (1..=count as usize)
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .unwrap() as u32;
    Ok(Image {
        shape: mask.shape.clone(),
        data: labels.iter().map(|&l| f64::from(u8::from(l == keep))).collect(),
    })
}

/// Drops components with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &Image, min_area: usize) -> Result<Image, ImageError> {
    let (labels, count) = label_components(mask)?;
    let sizes = component_sizes(&labels, count);
    Ok(Image {
        shape: mask.shape.clone(),
        data: labels
            .iter()
            .map(|&l| f64::from(u8::from(l != 0 && sizes[l as usize] >= min_area)))
            .collect(),
    })
}

/// Fills background regions not 4-connected to the image border.
pub fn fill_holes(mask: &Image) -> Result<Image, ImageError> {
    let (h, w) = mask.dims2()?;
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for p in 0..h * w {
        let (y, x) = (p / w, p % w);
        let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
        if border && mask.data[p] == 0.0 {
            outside[p] = true;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / w, p % w);
        let mut neighbours = [None; 4];
        if y > 0 {
            neighbours[0] = Some(p - w);
        }
        if y + 1 < h {
            neighbours[1] = Some(p + w);
        }
        if x > 0 {
            neighbours[2] = Some(p - 1);
        }
        if x + 1 < w {
            neighbours[3] = Some(p + 1);
        }
        for q in neighbours.into_iter().flatten() {
            if !outside[q] && mask.data[q] == 0.0 {
                outside[q] = true;
                queue.push_back(q);
            }
        }
    }
    Ok(Image {
        shape: mask.shape.clone(),
        data: outside.iter().map(|&o| f64::from(u8::from(!o))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask: Image,
    /// Set when the input was single-valued and the mask is empty.
    pub degenerate: bool,
}

/// Otsu threshold over `[min, max]`, largest 4-connected bright component,
/// holes filled.
pub fn foreground_mask(img: &Image) -> Result<ForegroundMask, ImageError> {
    img.dims2()?;
    let (lo, hi) = img.min_max().ok_or(ImageError::Empty)?;
    let Some(split) = otsu_threshold(&img.data, lo, hi) else {
        return Ok(ForegroundMask {
            mask: img.map(|_| 0.0),
            degenerate: true,
        });
    };
    let raw = img.map(|v| f64::from(u8::from(split.is_foreground(v))));
    let mask = fill_holes(&largest_component(&raw)?)?;
    Ok(ForegroundMask {
        mask,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStrategy {
    Fixed(f64),
    Otsu,
}

pub const DEFAULT_MIN_AREA: usize = 4;

/// Probability map to mask: fixed or Otsu threshold, then removal of
/// components smaller than `min_area`.
pub fn binary_normalize(
    prob: &Image,
    strategy: ThresholdStrategy,
    min_area: usize,
) -> Result<Image, ImageError> {
    let raw = match strategy {
        ThresholdStrategy::Fixed(t) => prob.map(|v| f64::from(u8::from(v >= t))),
        ThresholdStrategy::Otsu => match otsu_threshold(&prob.data, 0.0, 1.0) {
            Some(split) => prob.map(|v| f64::from(u8::from(split.is_foreground(v)))),
            None => prob.map(|v| f64::from(u8::from(v >= 0.5))),
        },
    };
    if min_area <= 1 {
        return Ok(raw);
    }
    remove_small_components(&raw, min_area)
}

/// Edge-replicating box mean over a `(2r+1)` square window.
pub fn box_blur(img: &Image, radius: usize) -> Result<Image, ImageError> {
    let (h, w) = img.dims2()?;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                let xx = (x + d).saturating_sub(radius).min(w - 1);
                s += img.data[y * w + xx];
            }
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                let yy = (y + d).saturating_sub(radius).min(h - 1);
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s / norm;
        }
    }
    Ok(Image {
        shape: img.shape.clone(),
        data: out,
    })
}

/// Central-difference gradient magnitude with edge clamping.
pub fn gradient_magnitude(img: &Image) -> Result<Image, ImageError> {
    let (h, w) = img.dims2()?;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = (img.at(y, (x + 1).min(w - 1)) - img.at(y, x.saturating_sub(1))) / 2.0;
            let gy = (img.at((y + 1).min(h - 1), x) - img.at(y.saturating_sub(1), x)) / 2.0;
            out[y * w + x] = libm::sqrt(gx * gx + gy * gy);
        }
    }
    Ok(Image {
        shape: img.shape.clone(),
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Mirror { axis: usize },
    /// Counter-clockwise quarter turns in the plane of the first two axes.
    Rot90 { k: u32 },
    Crop { origin: [usize; 2], size: [usize; 2] },
    RandomCrop { size: [usize; 2] },
    /// Adds i.i.d. `N(0, sigma^2)` then clamps to the clamp range.
    GaussianNoise { sigma: f64 },
}

/// Applies one augmentation. Randomized variants draw only from a ChaCha
/// generator seeded with `seed`. Noise is clamped to `range`, or to the
/// input's own `[min, max]` when no range is given.
pub fn augment(
    img: &Image,
    op: AugmentOp,
    seed: u64,
    range: Option<(f64, f64)>,
) -> Result<Image, ImageError> {
    match op {
        AugmentOp::Mirror { axis } => mirror(img, axis),
        AugmentOp::Rot90 { k } => rot90(img, k),
        AugmentOp::Crop { origin, size } => crop(img, origin, size),
        AugmentOp::RandomCrop { size } => {
            if img.shape.len() < 2 || size[0] > img.shape[0] || size[1] > img.shape[1] {
                return Err(ImageError::CropOutOfBounds);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y0 = rng.random_range(0..=img.shape[0] - size[0]);
            let x0 = rng.random_range(0..=img.shape[1] - size[1]);
            crop(img, [y0, x0], size)
        }
        AugmentOp::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let (lo, hi) = range.or_else(|| img.min_max()).ok_or(ImageError::Empty)?;
            let normal = Normal::new(0.0, sigma.abs()).expect("finite sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Image {
                shape: img.shape.clone(),
                data: img
                    .data
                    .iter()
                    .map(|&v| (v + normal.sample(&mut rng)).clamp(lo, hi))
                    .collect(),
            })
        }
    }
}

fn mirror(img: &Image, axis: usize) -> Result<Image, ImageError> {
    if axis >= img.shape.len() {
        return Err(ImageError::AxisOutOfRange(axis));
    }
    let st = strides(&img.shape);
    let n = img.shape[axis];
    let mut data = vec![0.0; img.len()];
    for (i, slot) in data.iter_mut().enumerate() {
        let c = (i / st[axis]) % n;
        let src = i - c * st[axis] + (n - 1 - c) * st[axis];
        *slot = img.data[src];
    }
    Ok(Image {
        shape: img.shape.clone(),
        data,
    })
}

fn rot90(img: &Image, k: u32) -> Result<Image, ImageError> {
    if img.shape.len() < 2 {
        return Err(ImageError::NotTwoDimensional);
    }
    let mut cur = img.clone();
    for _ in 0..k % 4 {
        let (h, w) = (cur.shape[0], cur.shape[1]);
        let inner: usize = cur.shape[2..].iter().product();
        let mut shape = cur.shape.clone();
        shape.swap(0, 1);
        let mut data = vec![0.0; cur.len()];
        // out[i][j] = in[j][w - 1 - i]
        for i in 0..w {
            for j in 0..h {
                let src = (j * w + (w - 1 - i)) * inner;
                let dst = (i * h + j) * inner;
                data[dst..dst + inner].copy_from_slice(&cur.data[src..src + inner]);
            }
        }
        cur = Image { shape, data };
    }
    Ok(cur)
}

fn crop(img: &Image, origin: [usize; 2], size: [usize; 2]) -> Result<Image, ImageError> {
    if img.shape.len() < 2
        || size[0] == 0
        || size[1] == 0
        || origin[0] + size[0] > img.shape[0]
        || origin[1] + size[1] > img.shape[1]
    {
        return Err(ImageError::CropOutOfBounds);
    }
    let w = img.shape[1];
    let inner: usize = img.shape[2..].iter().product();
    let mut data = Vec::with_capacity(size[0] * size[1] * inner);
    for y in origin[0]..origin[0] + size[0] {
        let start = (y * w + origin[1]) * inner;
        data.extend_from_slice(&img.data[start..start + size[1] * inner]);
    }
    let mut shape = img.shape.clone();
    shape[0] = size[0];
    shape[1] = size[1];
    Ok(Image { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img2(h: usize, w: usize, data: &[f64]) -> Image {
        Image::new(vec![h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn window_level_lung_window() {
        let img = img2(1, 4, &[-200.0, 0.0, 200.0, 1000.0]);
        let out = window_level_rescale(&img, 400.0, 0.0).unwrap();
        assert_eq!(out.data, vec![0.0, 0.5, 1.0, 1.0]);
        assert_eq!(
            window_level_rescale(&img, 0.0, 0.0),
            Err(ImageError::NonPositiveWidth)
        );
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore_normalize(&img2(1, 2, &[1.0, 3.0])).data, vec![-1.0, 1.0]);
        assert_eq!(
            zscore_normalize(&img2(1, 3, &[5.0, 5.0, 5.0])).data,
            vec![0.0, 0.0, 0.0]
        );
    }

    proptest! {
        #[test]
        fn zscore_output_is_centered(data in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = data.len();
            let out = zscore_normalize(&Image::new(vec![1, n], data).unwrap());
            prop_assert!(out.mean().abs() < 1e-9);
        }

        #[test]
        fn unit_factor_resample_is_identity(
            data in prop::collection::vec(-5f64..5.0, 12),
            linear in any::<bool>(),
        ) {
            let img = Image::new(vec![3, 4], data).unwrap();
            let mode = if linear { ResampleMode::Linear } else { ResampleMode::Nearest };
            prop_assert_eq!(resample(&img, &[1.0, 1.0], mode).unwrap(), img);
        }

        #[test]
        fn geometric_involutions(data in prop::collection::vec(0f64..1.0, 20), axis in 0usize..2) {
            let img = Image::new(vec![4, 5], data).unwrap();
            let twice = augment(&augment(&img, AugmentOp::Mirror { axis }, 0, None).unwrap(),
                AugmentOp::Mirror { axis }, 0, None).unwrap();
            prop_assert_eq!(&twice, &img);
            let mut r = img.clone();
            for _ in 0..4 {
                r = augment(&r, AugmentOp::Rot90 { k: 1 }, 0, None).unwrap();
            }
            prop_assert_eq!(&r, &img);
            prop_assert_eq!(augment(&img, AugmentOp::GaussianNoise { sigma: 0.0 }, 5, None).unwrap(), img);
        }
    }

    #[test]
    fn nearest_upsampling_replicates() {
        let img = img2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = resample(&img, &[2.0, 2.0], ResampleMode::Nearest).unwrap();
        assert_eq!(out.shape, vec![4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.data, expected);
    }

    #[test]
    fn linear_upsampling_matches_hand_evaluation() {
        // Source coordinates 0.25, 0.75, 1.25, 1.75 shifted by -0.5 and
        // clamped to [0, 1]: 0, 0.25, 0.75, 1 -> 0, 2.5, 7.5, 10.
        let img = Image::new(vec![2], vec![0.0, 10.0]).unwrap();
        let out = resample(&img, &[2.0], ResampleMode::Linear).unwrap();
        assert_eq!(out.data, vec![0.0, 2.5, 7.5, 10.0]);
    }

    #[test]
    fn resample_second_axis_of_3d() {
        let img = Image::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let out = resample(&img, &[1.0, 0.5, 1.0], ResampleMode::Nearest).unwrap();
        assert_eq!(out.shape, vec![2, 1, 2]);
        assert_eq!(
            resample(&img, &[1.0, 0.0, 1.0], ResampleMode::Nearest),
            Err(ImageError::NonPositiveFactor)
        );
    }

    /// Oracle: try every midpoint between distinct values and keep the one
    /// with maximal between-class variance.
    fn brute_force_mask(values: &[f64]) -> Vec<f64> {
        let mut uniq: Vec<f64> = values.to_vec();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        let mut best = (f64::MIN, 0.0);
        for pair in uniq.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            let (lo, hi): (Vec<f64>, Vec<f64>) = values.iter().partition(|&&v| v < t);
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = lo.len() as f64 * hi.len() as f64 * (m0 - m1) * (m0 - m1);
            if var > best.0 {
                best = (var, t);
            }
        }
        values.iter().map(|&v| f64::from(u8::from(v > best.1))).collect()
    }

    #[test]
    fn otsu_bimodal_matches_exhaustive_search() {
        // 10x10, left half 10, right half 200.
        let data: Vec<f64> = (0..100).map(|i| if i % 10 < 5 { 10.0 } else { 200.0 }).collect();
        let img = img2(10, 10, &data);
        let fg = foreground_mask(&img).unwrap();
        assert!(!fg.degenerate);
        assert_eq!(fg.mask.data, brute_force_mask(&data));
    }

    #[test]
    fn constant_image_is_degenerate() {
        let fg = foreground_mask(&Image::filled(vec![4, 4], 3.0)).unwrap();
        assert!(fg.degenerate);
        assert!(fg.mask.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreground_keeps_largest_blob_and_fills_holes() {
        let mut img = Image::filled(vec![20, 20], 0.0);
        // 30 px blob: 5x6 rectangle with a one-pixel hole.
        for y in 2..7 {
            for x in 2..8 {
                img.data[y * 20 + x] = 1.0;
            }
        }
        img.data[4 * 20 + 4] = 0.0;
        // 10 px blob: 2x5.
        for y in 12..14 {
            for x in 10..15 {
                img.data[y * 20 + x] = 1.0;
            }
        }
        let mask = foreground_mask(&img).unwrap().mask;
        assert_eq!(mask.data.iter().sum::<f64>(), 30.0);
        assert_eq!(mask.at(4, 4), 1.0);
        assert_eq!(mask.at(12, 10), 0.0);
    }

    #[test]
    fn binary_normalize_fixed_and_area_filter() {
        let prob = Image::filled(vec![3, 3], 0.9);
        let mask = binary_normalize(&prob, ThresholdStrategy::Fixed(0.5), DEFAULT_MIN_AREA).unwrap();
        assert!(mask.data.iter().all(|&v| v == 1.0));

        let mut prob = Image::filled(vec![6, 6], 0.0);
        prob.data[0] = 1.0;
        prob.data[1] = 1.0;
        let mask = binary_normalize(&prob, ThresholdStrategy::Fixed(0.5), 4).unwrap();
        assert_eq!(mask.data.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn binary_normalize_otsu_bimodal() {
        let data: Vec<f64> = (0..64).map(|i| if i < 40 { 0.1 } else { 0.9 }).collect();
        let prob = img2(8, 8, &data);
        let mask = binary_normalize(&prob, ThresholdStrategy::Otsu, 1).unwrap();
        assert_eq!(mask.data, brute_force_mask(&data));
        let split = otsu_threshold(&data, 0.0, 1.0).unwrap();
        assert!(split.threshold() > 0.1 && split.threshold() < 0.9);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(vec![4, 4], 1.0);
        assert_eq!(
            augment(&img, AugmentOp::Crop { origin: [2, 2], size: [3, 1] }, 0, None),
            Err(ImageError::CropOutOfBounds)
        );
        let a = augment(&img, AugmentOp::RandomCrop { size: [2, 3] }, 11, None).unwrap();
        assert_eq!(a.shape, vec![2, 3]);
    }

    #[test]
    fn rot90_orientation() {
        // [[1,2],[3,4]] rotated counter-clockwise is [[2,4],[1,3]].
        let img = img2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = augment(&img, AugmentOp::Rot90 { k: 1 }, 0, None).unwrap();
        assert_eq!(r.data, vec![2.0, 4.0, 1.0, 3.0]);
        let tall = img2(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(augment(&tall, AugmentOp::Rot90 { k: 1 }, 0, None).unwrap().shape, vec![3, 1]);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let img = img2(4, 4, &[0.0, 1.0, 0.5, 0.5, 0.2, 0.3, 0.4, 0.6, 0.0, 1.0, 0.5, 0.5, 0.2, 0.3, 0.4, 0.6]);
        let op = AugmentOp::GaussianNoise { sigma: 0.5 };
        let a = augment(&img, op, 3, None).unwrap();
        assert_eq!(a, augment(&img, op, 3, None).unwrap());
        assert_ne!(a, augment(&img, op, 4, None).unwrap());
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(vec![5, 6], 2.5);
        assert_eq!(box_blur(&img, 3).unwrap(), img);
        assert!(gradient_magnitude(&img).unwrap().data.iter().all(|&v| v == 0.0));
    }
}
