//! Population-level Gaussian-process estimates on a time grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FittedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMethod {
    Fpc,
    Empirical,
    /// A generating process discretised for scoring, not an estimate.
    Truth,
}

impl std::fmt::Display for GpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GpMethod::Fpc => write!(f, "fpc"),
            GpMethod::Empirical => write!(f, "empirical"),
            GpMethod::Truth => write!(f, "truth"),
        }
    }
}

/// Discretised mean vector and covariance matrix of the population process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpEstimate {
    pub grid: Vec<f64>,
    pub mean: DVector<f64>,
    /// Symmetric; PSD up to roundoff. Consumers that need exact PSD use
    /// [`GpEstimate::clamped_cov`].
    pub cov: DMatrix<f64>,
    pub method: GpMethod,
}

impl GpEstimate {
    /// Covariance with negative eigenvalues clamped to zero.
    pub fn clamped_cov(&self) -> DMatrix<f64> {
        crate::metrics::psd_clamp(&self.cov)
    }

    /// Restrict to a subset of grid indices.
    pub fn restrict(&self, idx: &[usize]) -> GpEstimate {
        let grid: Vec<f64> = idx.iter().map(|&i| self.grid[i]).collect();
        let mean = DVector::from_fn(idx.len(), |r, _| self.mean[idx[r]]);
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.cov[(idx[r], idx[c])]);
        GpEstimate {
            grid,
            mean,
            cov,
            method: self.method,
        }
    }

    /// Write `time,mean` rows and a plain square covariance matrix as two CSVs.
    pub fn write_csv<W1: std::io::Write, W2: std::io::Write>(
        &self,
        mean_writer: W1,
        cov_writer: W2,
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(mean_writer);
        w.write_record(["time", "mean"])
            .map_err(|e| Error::Numerical(e.to_string()))?;
        for (t, m) in self.grid.iter().zip(self.mean.iter()) {
            w.write_record([crate::data::fmt_f64(*t), crate::data::fmt_f64(*m)])
                .map_err(|e| Error::Numerical(e.to_string()))?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(cov_writer);
        for r in 0..self.cov.nrows() {
            let row: Vec<String> = (0..self.cov.ncols())
                .map(|c| crate::data::fmt_f64(self.cov[(r, c)]))
                .collect();
            w.write_record(&row)
                .map_err(|e| Error::Numerical(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `N` equally spaced grid points over the domain.
pub fn default_grid(domain: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = domain;
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// FPC method: mean `f̂₀`, covariance `Σ_k f̂_k(s) f̂_k(t)`; rank at most `K`.
pub fn gp_fpc(model: &FittedModel, grid: &[f64]) -> GpEstimate {
    let n = grid.len();
    let mean = DVector::from_vec(model.mean_curve(grid, 0));
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for b in &model.coefs.betas {
        let fk = DVector::from_fn(n, |i, _| model.basis.eval(grid[i], 0).dot(b));
        cov += &fk * fk.transpose();
    }
    let covt = cov.transpose();
    cov = (cov + covt) * 0.5;
    GpEstimate {
        grid: grid.to_vec(),
        mean,
        cov,
        method: GpMethod::Fpc,
    }
}

/// Empirical method: sample mean and covariance (divisor `d`) of the
/// predicted trajectories.
pub fn gp_empirical(model: &FittedModel, grid: &[f64]) -> Result<GpEstimate> {
    let d = model.n_subjects();
    if d < 2 {
        return Err(Error::DegenerateCovariance(d));
    }
    let n = grid.len();
    let mut trajectories = DMatrix::<f64>::zeros(d, n);
    for i in 0..d {
        let mu = model.predict_trajectory(i, grid, 0)?;
        for (j, v) in mu.into_iter().enumerate() {
            trajectories[(i, j)] = v;
        }
    }
    let mut mean = DVector::<f64>::zeros(n);
    for i in 0..d {
        mean += trajectories.row(i).transpose();
    }
    mean /= d as f64;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..d {
        let centered = trajectories.row(i).transpose() - &mean;
        cov += &centered * centered.transpose();
    }
    cov /= d as f64;
    let covt = cov.transpose();
    cov = (cov + covt) * 0.5;
    Ok(GpEstimate {
        grid: grid.to_vec(),
        mean,
        cov,
        method: GpMethod::Empirical,
    })
}
