//! Expected Improvement and Upper Confidence Bound.

use serde::{Deserialize, Serialize};

use super::surrogate::Surrogate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Acquisition {
    Ei {
        #[serde(default = "default_xi")]
        xi: f64,
    },
    Ucb {
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
}

fn default_xi() -> f64 {
    0.01
}

fn default_kappa() -> f64 {
    2.0
}

impl Default for Acquisition {
    fn default() -> Self {
        Acquisition::Ei { xi: default_xi() }
    }
}

pub fn normal_pdf(z: f64) -> f64 {
    libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// EI for maximization; never negative.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    let gain = mu - best - xi;
    if !(sigma > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

pub fn upper_confidence_bound(mu: f64, sigma: f64, kappa: f64) -> f64 {
    mu + kappa * sigma
}

/// Scores a cube point. `xi` is expressed in standardized target units,
/// so EI scales linearly under affine rescaling of the objective.
pub fn acquisition_value(s: &Surrogate, v: &[f64], a: Acquisition, best_y: f64) -> f64 {
    let (mu, var) = s.predict(v);
    let sigma = libm::sqrt(var.max(0.0));
    match a {
        Acquisition::Ei { xi } => expected_improvement(mu, sigma, best_y, xi * s.scale()),
        Acquisition::Ucb { kappa } => upper_confidence_bound(mu, sigma, kappa),
    }
}
