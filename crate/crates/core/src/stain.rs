//! Histopathology colour tools: Reinhard statistics transfer in CIE LAB and
//! Ruifrok optical-density colour deconvolution.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{Image, ImageError};
use crate::linalg::{mat3_inverse, mat3_mul_vec, Mat3};

const SRGB_TO_XYZ: Mat3 = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        libm::pow((c + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    let v = if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * libm::pow(c, 1.0 / 2.4) - 0.055
    };
    v * 255.0
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        libm::cbrt(t)
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB (0..=255 per channel) to CIE LAB under D65.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat3_mul_vec(&SRGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`]; the result is not clamped.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ];
    mat3_mul_vec(&mat3_inverse(&SRGB_TO_XYZ), xyz).map(linear_to_srgb)
}

/// Per-channel LAB mean and population standard deviation, in `L, a, b`
/// order. Six numbers altogether: `[mean_l, mean_a, mean_b, std_l, std_a,
/// std_b]` when flattened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabStats {
    pub fn from_flat(v: [f64; 6]) -> LabStats {
        LabStats {
            mean: [v[0], v[1], v[2]],
            std: [v[3], v[4], v[5]],
        }
    }

    pub fn to_flat(self) -> [f64; 6] {
        [
            self.mean[0],
            self.mean[1],
            self.mean[2],
            self.std[0],
            self.std[1],
            self.std[2],
        ]
    }

    pub fn of(pixels: &[[f64; 3]]) -> LabStats {
        let n = pixels.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for p in pixels {
            for c in 0..3 {
                mean[c] += p[c];
            }
        }
        mean = mean.map(|m| m / n);
        let mut var = [0.0; 3];
        for p in pixels {
            for c in 0..3 {
                var[c] += (p[c] - mean[c]) * (p[c] - mean[c]);
            }
        }
        LabStats {
            mean,
            std: var.map(|v| libm::sqrt(v / n)),
        }
    }
}

fn rgb_pixels(img: &Image) -> Result<impl Iterator<Item = [f64; 3]> + '_, ImageError> {
    match img.shape.as_slice() {
        [_, _, 3] => Ok(img.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])),
        _ => Err(ImageError::ShapeMismatch),
    }
}

/// LAB pixels of an `[h, w, 3]` RGB image.
pub fn to_lab(img: &Image) -> Result<Vec<[f64; 3]>, ImageError> {
    Ok(rgb_pixels(img)?.map(rgb_to_lab).collect())
}

/// Reinhard transfer carried out entirely in LAB space (before converting
/// back and quantizing). A channel with zero source spread is only shifted.
pub fn reinhard_lab(src: &Image, target: &LabStats) -> Result<Vec<[f64; 3]>, ImageError> {
    let lab = to_lab(src)?;
    let stats = LabStats::of(&lab);
    Ok(lab
        .into_iter()
        .map(|p| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                let centered = p[c] - stats.mean[c];
                let scaled = if stats.std[c] > 0.0 {
                    centered * (target.std[c] / stats.std[c])
                } else {
                    centered
                };
                out[c] = scaled + target.mean[c];
            }
            out
        })
        .collect())
}

/// Reinhard stain normalization of an `[h, w, 3]` 8-bit RGB image. The
/// output holds rounded values clamped to `0..=255`.
pub fn stain_normalize_reinhard(src: &Image, target: &LabStats) -> Result<Image, ImageError> {
    let lab = reinhard_lab(src, target)?;
    let data = lab
        .into_iter()
        .flat_map(lab_to_rgb)
        .map(|v| libm::round(v).clamp(0.0, 255.0))
        .collect();
    Image::new(src.shape.clone(), data)
}

/// Two-stain optical density basis. Rows are normalized to unit length on
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
}

impl Default for StainMatrix {
    /// Ruifrok & Johnston H&E vectors.
    fn default() -> Self {
        StainMatrix::new([0.650, 0.704, 0.286], [0.072, 0.990, 0.105])
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    v.map(|x| x / n)
}

impl StainMatrix {
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3]) -> StainMatrix {
        StainMatrix {
            hematoxylin: unit(hematoxylin),
            eosin: unit(eosin),
        }
    }

    /// Moore-Penrose pseudo-inverse of the 3x2 matrix whose columns are the
    /// stain vectors, as two rows.
    fn pseudo_inverse(&self) -> [[f64; 3]; 2] {
        let (h, e) = (self.hematoxylin, self.eosin);
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
        let det = hh * ee - he * he;
        let (i00, i01, i11) = (ee / det, -he / det, hh / det);
        let mut rows = [[0.0; 3]; 2];
        for c in 0..3 {
            rows[0][c] = i00 * h[c] + i01 * e[c];
            rows[1][c] = i01 * h[c] + i11 * e[c];
        }
        rows
    }

    /// Optical density produced by the given stain concentrations.
    pub fn optical_density(&self, h: f64, e: f64) -> [f64; 3] {
        [0, 1, 2].map(|c| h * self.hematoxylin[c] + e * self.eosin[c])
    }
}

/// `-log10((v + 1) / 256)` per channel.
pub fn optical_density(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| -libm::log10((v + 1.0) / 256.0))
}

/// RGB value whose optical density is `od` (inverse of [`optical_density`]).
pub fn rgb_from_optical_density(od: [f64; 3]) -> [f64; 3] {
    od.map(|d| 256.0 * libm::pow(10.0, -d) - 1.0)
}

/// Concentrations `(h, e)` for one optical-density vector.
pub fn deconvolve_od(matrix: &StainMatrix, od: [f64; 3]) -> [f64; 2] {
    let p = matrix.pseudo_inverse();
    [
        p[0][0] * od[0] + p[0][1] * od[1] + p[0][2] * od[2],
        p[1][0] * od[0] + p[1][1] * od[1] + p[1][2] * od[2],
    ]
}

/// Splits an `[h, w, 3]` RGB image into hematoxylin and eosin concentration
/// maps of shape `[h, w]`.
pub fn stain_deconvolve(src: &Image, matrix: &StainMatrix) -> Result<(Image, Image), ImageError> {
    let pixels: Vec<[f64; 3]> = rgb_pixels(src)?.collect();
    let (mut h, mut e) = (Vec::with_capacity(pixels.len()), Vec::with_capacity(pixels.len()));
    for p in pixels {
        let [ch, ce] = deconvolve_od(matrix, optical_density(p));
        h.push(ch);
        e.push(ce);
    }
    let shape = src.shape[..2].to_vec();
    Ok((Image::new(shape.clone(), h)?, Image::new(shape, e)?))
}
