//! Surrogate model selection and fitting.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::forest::RandomForest;
use super::gp::GaussianProcess;

/// Predictive variance of the constant surrogate used when every observed
/// objective is identical.
pub const DEGENERATE_VARIANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    Gp,
    RegressionForest,
}

#[derive(Debug, Clone)]
pub enum Surrogate {
    Gp(GaussianProcess),
    Forest { forest: RandomForest, scale: f64 },
    /// Fallback for degenerate data: constant mean with floor variance.
    Constant { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SurrogateError {
    #[error("need at least 2 completed trials, have {0}")]
    TooFewPoints(usize),
    #[error("kernel matrix is not positive definite")]
    Singular,
}

impl Surrogate {
    pub fn predict(&self, v: &[f64]) -> (f64, f64) {
        match self {
            Surrogate::Gp(gp) => gp.predict(v),
            Surrogate::Forest { forest, .. } => forest.predict(v),
            Surrogate::Constant { mean } => (*mean, DEGENERATE_VARIANCE),
        }
    }

    /// Standard deviation of the training targets (1 when degenerate).
    pub fn scale(&self) -> f64 {
        match self {
            Surrogate::Gp(gp) => gp.predict_scale(),
            Surrogate::Forest { scale, .. } => *scale,
            Surrogate::Constant { .. } => 1.0,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Surrogate::Constant { .. })
    }
}

/// Fits a surrogate to encoded inputs and objective values. Identical
/// objectives yield [`Surrogate::Constant`].
pub fn fit_surrogate(
    x: Vec<Vec<f64>>,
    y: &[f64],
    kind: SurrogateKind,
    seed: u64,
) -> Result<Surrogate, SurrogateError> {
    if y.len() < 2 {
        return Err(SurrogateError::TooFewPoints(y.len()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = libm::sqrt(y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Ok(Surrogate::Constant { mean });
    }
    match kind {
        SurrogateKind::Gp => GaussianProcess::fit(x, y, mean, std, seed)
            .map(Surrogate::Gp)
            .ok_or(SurrogateError::Singular),
        SurrogateKind::RegressionForest => Ok(Surrogate::Forest {
            forest: RandomForest::fit(&x, y, seed),
            scale: std,
        }),
    }
}
