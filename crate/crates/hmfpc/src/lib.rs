//! Hierarchical modelling with functional principal components (HM-FPC) for
//! sparse longitudinal data.
//!
//! Each subject's trajectory is modelled as a smooth mean curve plus a
//! subject-specific combination of `K` mutually orthogonal functional
//! principal components, observed with Gaussian error. Estimation maximises a
//! penalised likelihood (roughness penalty on the expected trajectory
//! curvature), with the number of components chosen by fraction of variance
//! explained and the smoothing parameter by an approximate marginal
//! likelihood. Subject trajectories are predicted from conditional-mean
//! scores, with pointwise confidence bands from a parametric bootstrap, and
//! the population-level Gaussian process is recovered from the fitted
//! components or empirically from the predicted trajectories.
//!
//! The crate also ships seeded generators for three benchmark processes and a
//! simulation harness that scores trajectory and population-level estimates
//! (integrated squared error, interval coverage and width, 2-Wasserstein
//! distance between Gaussian processes).

pub mod basis;
pub mod data;
pub mod error;
pub mod fit;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod orthoparam;
pub mod population;
pub mod rng;
pub mod simgen;
pub mod tuning;

mod bfgs;

pub use basis::{DesignMatrix, OrthoBasis};
pub use data::{LongitudinalDataset, Subject};
pub use error::{ConvergenceDiag, Error, Result};
pub use fit::{estimate_scores, fit_sequence, maximize, FitOptions, FitSequence, FittedModel};
pub use inference::{confidence_band, draw_bootstrap, BootstrapSample, ConfidenceBand};
pub use metrics::{
    aggregate_runs, ise, typical_run, wasserstein2, RunScores, RunSummary, TrajectoryScore,
    WassersteinScore,
};
pub use model::{
    expected_wiggliness, gradient, log_likelihood, penalized_log_likelihood, subject_covariance,
    PenalizedObjective, SubjectBlock,
};
pub use orthoparam::{expand, normalize_fit, OrthoCoefs, ParamVector};
pub use population::{gp_empirical, gp_fpc, GpEstimate, GpMethod};
pub use simgen::{generate, run_benchmark, BenchmarkConfig, Dgp, SimSpec, SimulatedDataset};
pub use tuning::{
    approx_log_marginal_likelihood, log_prior_remainder, select_gamma, select_k, SelectedK,
    TuningTrace,
};
