//! Bayesian hyper-parameter optimization: search spaces, surrogates,
//! acquisition functions and the ask/tell study loop.

mod acquisition;
mod forest;
mod gp;
mod lowdisc;
mod optimize;
mod space;
mod study;
mod surrogate;

pub use acquisition::{
    acquisition_value, expected_improvement, normal_cdf, normal_pdf, upper_confidence_bound, Acquisition,
};
pub use forest::{RandomForest, TREES};
pub use gp::{
    initial_params, log_marginal_likelihood, GaussianProcess, KernelParams, FIT_EVALUATIONS, FIT_STARTS,
    LENGTH_SCALE_BOUNDS, NOISE_VARIANCE_BOUNDS, SIGNAL_VARIANCE_BOUNDS,
};
pub use lowdisc::ScrambledHalton;
pub use optimize::{nelder_mead, Minimum};
pub use space::{Dimension, Domain, HpValue, SearchSpace, SpaceError};
pub use study::{
    Strategy, Study, StudyError, StudySettings, Trial, TrialState, CANDIDATES, REFINE_STEPS, REFINED_CANDIDATES,
};
pub use surrogate::{fit_surrogate, Surrogate, SurrogateError, SurrogateKind, DEGENERATE_VARIANCE};
