//! Scoring of trajectory and population-level estimates: integrated squared
//! error, interval coverage and width, and the 2-Wasserstein distance between
//! discretised Gaussian processes with its mean/covariance split.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::GpEstimate;

/// Trapezoidal `∫ (est − truth)² dt` over the grid.
pub fn ise(grid: &[f64], est: &[f64], truth: &[f64]) -> Result<f64> {
    if grid.len() != est.len() || grid.len() != truth.len() {
        return Err(Error::GridMismatch(format!(
            "grid {}, est {}, truth {}",
            grid.len(),
            est.len(),
            truth.len()
        )));
    }
    if grid.len() < 2 {
        return Err(Error::GridMismatch("need at least two grid points".into()));
    }
    let sq = |i: usize| {
        let d = est[i] - truth[i];
        d * d
    };
    let mut acc = 0.0;
    for i in 0..grid.len() - 1 {
        acc += 0.5 * (grid[i + 1] - grid[i]) * (sq(i) + sq(i + 1));
    }
    Ok(acc)
}

/// Per-dataset trajectory scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub ise_per_subject: Vec<f64>,
    pub mise: f64,
    /// Mean pointwise coverage over grid then subjects.
    pub coverage: f64,
    pub mean_width: f64,
}

impl TrajectoryScore {
    pub fn new(ise_per_subject: Vec<f64>, coverage: f64, mean_width: f64) -> Self {
        let mise = ise_per_subject.iter().sum::<f64>() / ise_per_subject.len().max(1) as f64;
        Self {
            ise_per_subject,
            mise,
            coverage,
            mean_width,
        }
    }
}

/// Pointwise coverage fraction and mean width of a band against the truth.
pub fn band_coverage_width(lower: &[f64], upper: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = truth.len() as f64;
    let mut inside = 0.0;
    let mut width = 0.0;
    for i in 0..truth.len() {
        if truth[i] >= lower[i] && truth[i] <= upper[i] {
            inside += 1.0;
        }
        width += upper[i] - lower[i];
    }
    (inside / n, width / n)
}

/// Eigenvalues below this fraction of the largest are treated as exact zeros
/// (square roots would otherwise amplify rank-deficiency roundoff).
const EIG_REL_FLOOR: f64 = 1e-13;

fn clamped_eigs(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = EIG_REL_FLOOR * max;
    let vals = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > floor { l } else { 0.0 })
        .collect();
    (vals, eig.eigenvectors)
}

/// Symmetrise and clamp negative (and noise-level) eigenvalues to zero.
pub fn psd_clamp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = clamped_eigs(m);
    let n = m.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        if vals[k] > 0.0 {
            let v = vecs.column(k);
            out += v * v.transpose() * vals[k];
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition with clamping.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = clamped_eigs(m);
    let n = m.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        if vals[k] > 0.0 {
            let v = vecs.column(k);
            out += v * v.transpose() * vals[k].sqrt();
        }
    }
    out
}

/// Grid-averaged squared 2-Wasserstein distance and its mean/covariance split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WassersteinScore {
    /// `W̄₂ = W₂(N)/N`.
    pub w2_bar: f64,
    /// Mean component `d̄²_m`.
    pub dm2_bar: f64,
    /// Covariance component `d̄²_C`.
    pub dc2_bar: f64,
}

/// 2-Wasserstein distance between `N(m, C)` and `N(m̂, Ĉ)` on a common grid:
/// `‖m̂ − m‖² + trace(Ĉ + C − 2 (C^{1/2} Ĉ C^{1/2})^{1/2})`, divided by `N`.
pub fn wasserstein2(est: &GpEstimate, truth: &GpEstimate) -> Result<WassersteinScore> {
    if est.grid.len() != truth.grid.len()
        || est
            .grid
            .iter()
            .zip(&truth.grid)
            .any(|(a, b)| (a - b).abs() > 0.0)
    {
        return Err(Error::GridMismatch(
            "Wasserstein distance requires identical grids".into(),
        ));
    }
    let n = est.grid.len() as f64;
    let dm2 = (&est.mean - &truth.mean).norm_squared();
    let c_true = psd_clamp(&truth.cov);
    let c_est = psd_clamp(&est.cov);
    let root = psd_sqrt(&c_true);
    let inner = &root * &c_est * &root;
    let (inner_vals, _) = clamped_eigs(&inner);
    let trace_sqrt: f64 = inner_vals.iter().map(|&l| l.sqrt()).sum();
    let dc2 = c_est.trace() + c_true.trace() - 2.0 * trace_sqrt;
    Ok(WassersteinScore {
        w2_bar: (dm2 + dc2) / n,
        dm2_bar: dm2 / n,
        dc2_bar: dc2 / n,
    })
}

/// One simulation run's scores for a single estimation method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScores {
    pub mise: f64,
    pub coverage: f64,
    pub mean_width: f64,
    /// Population-level scores, one per GP method used.
    pub wasserstein: Vec<(String, WassersteinScore)>,
}

/// An aggregated estimate with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn mean_ci(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Estimate {
            value: mean,
            ci_lo: mean,
            ci_hi: mean,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Estimate {
        value: mean,
        ci_lo: mean - 1.96 * se,
        ci_hi: mean + 1.96 * se,
    }
}

/// `sqrt` of a mean-scale estimate, clamping the interval at zero.
fn sqrt_estimate(e: Estimate) -> Estimate {
    Estimate {
        value: e.value.max(0.0).sqrt(),
        ci_lo: e.ci_lo.max(0.0).sqrt(),
        ci_hi: e.ci_hi.max(0.0).sqrt(),
    }
}

/// Across-run summary: root-mean aggregates and interval properties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub rmise: Estimate,
    pub coverage: Estimate,
    pub mean_width: Estimate,
    /// Per GP method: (name, RMWE, RMSE_m, RMSE_C).
    pub population: Vec<(String, Estimate, Estimate, Estimate)>,
}

/// Aggregate per-run scores: `RMISE = sqrt(mean MISE)`, `RMWE = sqrt(MWE)`,
/// `RMSE_m`, `RMSE_C`, mean coverage and width, each with a 95% normal
/// interval across runs.
pub fn aggregate_runs(runs: &[RunScores]) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let mises: Vec<f64> = runs.iter().map(|r| r.mise).collect();
    let coverage = mean_ci(&runs.iter().map(|r| r.coverage).collect::<Vec<_>>());
    let width = mean_ci(&runs.iter().map(|r| r.mean_width).collect::<Vec<_>>());
    let mut methods: Vec<String> = Vec::new();
    for r in runs {
        for (name, _) in &r.wasserstein {
            if !methods.contains(name) {
                methods.push(name.clone());
            }
        }
    }
    let mut population = Vec::new();
    for name in methods {
        let ws: Vec<&WassersteinScore> = runs
            .iter()
            .filter_map(|r| {
                r.wasserstein
                    .iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, s)| s)
            })
            .collect();
        let rmwe = sqrt_estimate(mean_ci(&ws.iter().map(|s| s.w2_bar).collect::<Vec<_>>()));
        let rmse_m = sqrt_estimate(mean_ci(&ws.iter().map(|s| s.dm2_bar).collect::<Vec<_>>()));
        let rmse_c = sqrt_estimate(mean_ci(&ws.iter().map(|s| s.dc2_bar).collect::<Vec<_>>()));
        population.push((name, rmwe, rmse_m, rmse_c));
    }
    Ok(RunSummary {
        n_runs: runs.len(),
        rmise: sqrt_estimate(mean_ci(&mises)),
        coverage,
        mean_width: width,
        population,
    })
}

/// Index of the run whose combined error is closest to the mean; ties go to
/// the lowest index.
pub fn typical_run(combined: &[f64]) -> usize {
    let mean = combined.iter().sum::<f64>() / combined.len().max(1) as f64;
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &v) in combined.iter().enumerate() {
        let d = (v - mean).abs();
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    best
}

/// Indices of the elements sitting at the requested quantiles of `values`
/// (nearest order statistic). Used to pick subjects showing a range of
/// combined errors.
pub fn quantile_indices(values: &[f64], qs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    qs.iter()
        .map(|&q| {
            let h = (values.len() - 1) as f64 * q;
            order[h.round() as usize]
        })
        .collect()
}
