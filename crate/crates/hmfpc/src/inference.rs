//! Parametric-bootstrap pointwise confidence bands for trajectories and their
//! derivatives.
//!
//! Each draw samples `θ ~ N_p(θ̂, V)` with `V = −H⁻¹`, re-expands the
//! coefficient vectors, samples each subject's scores from their conditional
//! law given the data, and records the implied per-subject basis coefficients
//! `δ_i = β₀ + Σ_k u_ik β_k`. Bands are empirical quantiles of `δ_i' b(t)`
//! across draws. Tuning parameters `(K, γ)` stay fixed at their chosen values.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::OrthoBasis;
use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::model::{subject_covariance, PenalizedObjective};
use crate::orthoparam::{self, ParamVector};
use crate::rng;

/// One bootstrap draw: sampled parameters, per-subject scores and the
/// per-subject basis coefficients they imply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapDraw {
    pub theta: DVector<f64>,
    /// `d × K` sampled scores.
    pub scores: DMatrix<f64>,
    /// `d × n_B`: row `i` is `δ_i`.
    pub deltas: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSample {
    pub n_s: usize,
    pub seed: u64,
    pub draws: Vec<BootstrapDraw>,
}

/// Pointwise band at `level` from bootstrap quantiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub deriv: usize,
    /// Set when `n_s (1 − level)/2 < 5`: too few draws for the requested
    /// quantile resolution.
    pub precision_warning: bool,
}

/// Sampling covariance factor `L` with `L L' = V = (−H)⁻¹`, after symmetric
/// jitter escalation on both the negated Hessian and `V` itself.
fn sampling_factor(hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = hessian.nrows();
    let neg = -hessian.clone();
    let mut v = None;
    for jitter in [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
        let mut m = neg.clone();
        for i in 0..p {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            let mut inv = chol.inverse();
            let invt = inv.transpose();
            inv = (inv + invt) * 0.5;
            v = Some(inv);
            break;
        }
    }
    let v = v.ok_or(Error::IndefiniteHessian)?;
    let cap = 1e-6 * v.trace() / p as f64;
    let mut jitters = vec![0.0, 1e-10, 1e-9, 1e-8, 1e-7];
    jitters.push(cap.max(1e-10));
    for jitter in jitters {
        let mut m = v.clone();
        for i in 0..p {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(chol.l());
        }
    }
    Err(Error::IndefiniteHessian)
}

/// Generate `n_s` bootstrap draws. Per-draw streams are derived from
/// `(seed, draw index)`, so the sample is reproducible regardless of
/// scheduling.
pub fn draw_bootstrap(
    model: &FittedModel,
    obj: &PenalizedObjective,
    n_s: usize,
    seed: u64,
) -> Result<BootstrapSample> {
    if n_s == 0 {
        return Err(Error::InvalidArgument("n_s must be positive".into()));
    }
    if obj.n_subjects() != model.n_subjects() {
        return Err(Error::Integrity(format!(
            "model has {} subjects, data has {}",
            model.n_subjects(),
            obj.n_subjects()
        )));
    }
    let factor = sampling_factor(&model.hessian)?;
    let theta_hat = model.params.to_flat();
    let n_basis = model.basis.n_basis();
    let k = model.k;
    let penalty = model.basis.penalty();
    let draws: Vec<Result<BootstrapDraw>> = (0..n_s)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream_rng(seed, j as u64);
            let z = DVector::from_fn(theta_hat.len(), |_, _| rng::normal(&mut r));
            let theta = &theta_hat + &factor * z;
            let params = ParamVector::from_flat(&theta, n_basis, k)?;
            let coefs = orthoparam::expand(&params, penalty);
            let sigma2 = params.sigma2();
            let d = obj.n_subjects();
            let mut scores = DMatrix::<f64>::zeros(d, k);
            let mut deltas = DMatrix::<f64>::zeros(d, n_basis);
            for (i, block) in obj.blocks.iter().enumerate() {
                let n = block.n_obs();
                let mut f = DMatrix::zeros(n, k);
                for (c, b) in coefs.betas.iter().enumerate() {
                    f.set_column(c, &(&block.design * b));
                }
                let cov = subject_covariance(sigma2, f.clone())?;
                let resid = &block.y - &block.design * &params.beta0;
                let u_hat = f.transpose() * cov.solve_vec(&resid);
                // conditional covariance I_K - F' Σ⁻¹ F, symmetrised and
                // eigenvalue-clamped at zero (PSD analytically)
                let mut cond = DMatrix::<f64>::identity(k, k);
                for c in 0..k {
                    let col = f.column(c).into_owned();
                    let sc = cov.solve_vec(&col);
                    for row in 0..k {
                        cond[(row, c)] -= f.column(row).dot(&sc);
                    }
                }
                let cond = (cond.clone() + cond.transpose()) * 0.5;
                let eig = cond.symmetric_eigen();
                let zu = DVector::from_fn(k, |_, _| rng::normal(&mut r));
                let mut u = u_hat.clone();
                for c in 0..k {
                    let lam = eig.eigenvalues[c].max(0.0);
                    let dir = eig.eigenvectors.column(c);
                    u += dir * (lam.sqrt() * zu[c]);
                }
                let mut delta = params.beta0.clone();
                for (c, b) in coefs.betas.iter().enumerate() {
                    delta += b * u[c];
                }
                for c in 0..k {
                    scores[(i, c)] = u[c];
                }
                for c in 0..n_basis {
                    deltas[(i, c)] = delta[c];
                }
            }
            Ok(BootstrapDraw {
                theta,
                scores,
                deltas,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(n_s);
    for d in draws {
        out.push(d?);
    }
    Ok(BootstrapSample {
        n_s,
        seed,
        draws: out,
    })
}

/// Type-7 quantile (linear interpolation of order statistics).
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let i = (h.floor() as usize).min(n - 2);
    let frac = h - i as f64;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// Pointwise empirical quantile band for one subject on a time grid.
pub fn confidence_band(
    sample: &BootstrapSample,
    basis: &OrthoBasis,
    subject: usize,
    times: &[f64],
    level: f64,
    deriv: usize,
) -> Result<ConfidenceBand> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "level must lie in [0, 1], got {level}"
        )));
    }
    if deriv > 1 {
        return Err(Error::InvalidArgument(
            "bands support deriv 0 or 1".into(),
        ));
    }
    let d = sample
        .draws
        .first()
        .map(|dr| dr.deltas.nrows())
        .unwrap_or(0);
    if subject >= d {
        return Err(Error::UnknownSubject(subject));
    }
    let q_lo = (1.0 - level) / 2.0;
    let q_hi = (1.0 + level) / 2.0;
    let mut lower = Vec::with_capacity(times.len());
    let mut upper = Vec::with_capacity(times.len());
    let mut vals = vec![0.0; sample.draws.len()];
    for &t in times {
        let b = basis.eval(t, deriv);
        for (j, draw) in sample.draws.iter().enumerate() {
            vals[j] = draw.deltas.row(subject).transpose().dot(&b);
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(quantile(&vals, q_lo));
        upper.push(quantile(&vals, q_hi));
    }
    Ok(ConfidenceBand {
        times: times.to_vec(),
        lower,
        upper,
        level,
        deriv,
        precision_warning: (sample.n_s as f64) * (1.0 - level) / 2.0 < 5.0,
    })
}

/// Write bands as CSV rows `subject,time,estimate,lower,upper,level,deriv`.
pub fn write_bands_csv<W: std::io::Write>(
    writer: W,
    model: &FittedModel,
    sample: &BootstrapSample,
    subjects: &[usize],
    times: &[f64],
    level: f64,
    derivs: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "time", "estimate", "lower", "upper", "level", "deriv"])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    for &subject in subjects {
        for &deriv in derivs {
            let band = confidence_band(sample, &model.basis, subject, times, level, deriv)?;
            let est = model.predict_trajectory(subject, times, deriv)?;
            let id = model
                .subject_ids
                .get(subject)
                .cloned()
                .unwrap_or_else(|| subject.to_string());
            for (i, &t) in times.iter().enumerate() {
                w.write_record([
                    id.as_str(),
                    &crate::data::fmt_f64(t),
                    &crate::data::fmt_f64(est[i]),
                    &crate::data::fmt_f64(band.lower[i]),
                    &crate::data::fmt_f64(band.upper[i]),
                    &crate::data::fmt_f64(level),
                    &deriv.to_string(),
                ])
                .map_err(|e| Error::Numerical(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
