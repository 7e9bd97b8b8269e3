//! Gaussian-process regression with a Matérn-5/2 ARD kernel.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optimize::nelder_mead;
use crate::linalg::{backward_substitute, cholesky, forward_substitute};

pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (1e-2, 10.0);
pub const SIGNAL_VARIANCE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const NOISE_VARIANCE_BOUNDS: (f64, f64) = (1e-8, 1e-1);
pub const FIT_STARTS: usize = 16;
pub const FIT_EVALUATIONS: usize = 200;

const SQRT5: f64 = 2.236_067_977_499_79;
const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(dim: usize, length_scale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        KernelParams {
            length_scales: vec![length_scale; dim],
            signal_variance,
            noise_variance,
        }
    }

    fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.length_scales.iter().map(|l| libm::log(*l)).collect();
        v.push(libm::log(self.signal_variance));
        v.push(libm::log(self.noise_variance));
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        KernelParams {
            length_scales: v[..d].iter().map(|x| libm::exp(*x)).collect(),
            signal_variance: libm::exp(v[d]),
            noise_variance: libm::exp(v[d + 1]),
        }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| {
                let t = (x - y) / l;
                t * t
            })
            .sum();
        let r = libm::sqrt(r2);
        self.signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * libm::exp(-SQRT5 * r)
    }
}

fn log_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![libm::log(LENGTH_SCALE_BOUNDS.0); dim];
    let mut hi = vec![libm::log(LENGTH_SCALE_BOUNDS.1); dim];
    lo.push(libm::log(SIGNAL_VARIANCE_BOUNDS.0));
    hi.push(libm::log(SIGNAL_VARIANCE_BOUNDS.1));
    lo.push(libm::log(NOISE_VARIANCE_BOUNDS.0));
    hi.push(libm::log(NOISE_VARIANCE_BOUNDS.1));
    (lo, hi)
}

/// Log marginal likelihood of zero-mean targets `y` under `params`, or
/// `None` if the Gram matrix is numerically singular.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Option<f64> {
    let n = y.len();
    let l = gram_cholesky(x, params)?;
    let mut alpha = y.to_vec();
    forward_substitute(&l, n, &mut alpha);
    let fit: f64 = alpha.iter().map(|a| a * a).sum();
    let logdet: f64 = (0..n).map(|i| libm::log(l[i * n + i])).sum();
    Some(-0.5 * fit - logdet - 0.5 * n as f64 * libm::log(2.0 * core::f64::consts::PI))
}

fn gram_cholesky(x: &[Vec<f64>], params: &KernelParams) -> Option<Vec<f64>> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v = params.kernel(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] = params.signal_variance + params.noise_variance + JITTER;
    }
    cholesky(&k, n)
}

/// Fitted GP over normalized targets.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    pub params: KernelParams,
    x: Vec<Vec<f64>>,
    l: Vec<f64>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_std: f64,
}

impl GaussianProcess {
    /// Conditions on data with fixed kernel parameters. Targets are
    /// standardized internally; `y_std` must be positive.
    pub fn condition(x: Vec<Vec<f64>>, y: &[f64], y_mean: f64, y_std: f64, params: KernelParams) -> Option<Self> {
        let n = y.len();
        let l = gram_cholesky(&x, &params)?;
        let mut alpha: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        forward_substitute(&l, n, &mut alpha);
        backward_substitute(&l, n, &mut alpha);
        Some(GaussianProcess {
            params,
            x,
            l,
            alpha,
            y_mean,
            y_std,
        })
    }

    /// Chooses kernel parameters by maximizing the log marginal likelihood
    /// with multi-start bounded Nelder–Mead in log-parameter space.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64], y_mean: f64, y_std: f64, seed: u64) -> Option<Self> {
        let dim = x.first().map_or(0, Vec::len);
        let z: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        let (lo, hi) = log_bounds(dim);
        let cost = |theta: &[f64]| {
            log_marginal_likelihood(&x, &z, &KernelParams::from_log(theta)).map_or(f64::INFINITY, |v| -v)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(Vec<f64>, f64)> = None;
        for start in 0..FIT_STARTS {
            let theta0 = if start == 0 {
                initial_params(dim).to_log()
            } else {
                lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..=*b)).collect()
            };
            let m = nelder_mead(cost, &theta0, &lo, &hi, FIT_EVALUATIONS);
            if best.as_ref().is_none_or(|(_, v)| m.value < *v) {
                best = Some((m.x, m.value));
            }
        }
        let params = KernelParams::from_log(&best?.0);
        Self::condition(x, y, y_mean, y_std, params)
    }

    /// Posterior mean and variance of the latent function at `v`, in the
    /// original target units.
    pub fn predict(&self, v: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut k: Vec<f64> = self.x.iter().map(|xi| self.params.kernel(xi, v)).collect();
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        forward_substitute(&self.l, n, &mut k);
        let reduction: f64 = k.iter().map(|t| t * t).sum();
        let var = (self.params.signal_variance - reduction).max(0.0);
        (self.y_mean + self.y_std * mean, self.y_std * self.y_std * var)
    }

    pub fn predict_scale(&self) -> f64 {
        self.y_std
    }
}

/// Starting point used by [`GaussianProcess::fit`]; exposed so callers can
/// measure how much the optimizer improved on it.
pub fn initial_params(dim: usize) -> KernelParams {
    KernelParams::isotropic(dim, 0.5, 1.0, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = [0.05, 0.3, 0.5, 0.71, 0.93].iter().map(|v| vec![*v]).collect();
        let y = x.iter().map(|v| libm::sin(6.0 * v[0])).collect();
        (x, y)
    }

    fn stats(y: &[f64]) -> (f64, f64) {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let s = libm::sqrt(y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64);
        (m, s)
    }

    #[test]
    fn interpolates_noiseless_points() {
        let (x, y) = data();
        let (m, s) = stats(&y);
        let gp = GaussianProcess::condition(x.clone(), &y, m, s, KernelParams::isotropic(1, 0.3, 1.0, 1e-8)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((gp.predict(xi).0 - yi).abs() < 1e-3);
        }
        let fitted = GaussianProcess::fit(x.clone(), &y, m, s, 1).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((fitted.predict(xi).0 - yi).abs() < 5e-2);
        }
    }

    #[test]
    fn variance_grows_away_from_data() {
        let (x, y) = data();
        let (m, s) = stats(&y);
        let gp = GaussianProcess::fit(x.clone(), &y, m, s, 3).unwrap();
        let (_, at_data) = gp.predict(&x[2]);
        let (_, far) = gp.predict(&[5.0]);
        assert!(at_data <= far);
        assert!(at_data >= 0.0);
    }

    #[test]
    fn duplicate_inputs_with_different_targets() {
        let x = vec![vec![0.5], vec![0.5], vec![0.1]];
        let y = [1.0, 2.0, 0.0];
        let (m, s) = stats(&y);
        let gp = GaussianProcess::fit(x, &y, m, s, 0).unwrap();
        let (mu, var) = gp.predict(&[0.5]);
        assert!(mu.is_finite() && var.is_finite());
    }

    #[test]
    fn kernel_values() {
        let p = KernelParams::isotropic(2, 1.0, 2.0, 0.0);
        assert_eq!(p.kernel(&[0.0, 0.0], &[0.0, 0.0]), 2.0);
        let r: f64 = 1.0;
        let expected = 2.0 * (1.0 + SQRT5 * r + 5.0 / 3.0) * libm::exp(-SQRT5);
        assert!((p.kernel(&[0.0, 0.0], &[1.0, 0.0]) - expected).abs() < 1e-15);
    }
}
