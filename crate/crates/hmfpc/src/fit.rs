//! Penalised-likelihood maximisation with warm starts over `K`, score
//! estimation and trajectory prediction.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bfgs::{self, BfgsOptions};
use crate::data::Fnv;
use crate::error::{ConvergenceDiag, Error, Result};
use crate::model::{self, PenalizedObjective};
use crate::orthoparam::{self, alpha_dim, OrthoCoefs, ParamVector};
use crate::rng;

/// Scale of the seeded initial draw for a newly added component. Near-zero
/// keeps the warm-started objective within optimizer noise of the previous
/// optimum while breaking the exact-zero saddle.
const NEW_ALPHA_SD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Relative gradient tolerance: converged when `‖∇‖_∞ < tol · max(1, |ℓ_p|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Fresh initializations tried on convergence failure or suspected
    /// component-order swap.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 500,
            restarts: 5,
            seed: 0,
        }
    }
}

/// A converged fit at fixed `(K, γ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub basis: crate::basis::OrthoBasis,
    /// Optimizer coordinates at the optimum (pre-normalisation).
    pub params: ParamVector,
    /// Coefficient vectors after ordering/sign normalisation.
    pub coefs: OrthoCoefs,
    pub sigma2_hat: f64,
    pub k: usize,
    pub gamma: f64,
    pub subject_ids: Vec<String>,
    /// `d × K` conditional-mean scores, aligned with `coefs`.
    pub scores: DMatrix<f64>,
    /// Hessian of `ℓ_p` at the optimum (central differences of the exact
    /// gradient, symmetrised).
    pub hessian: DMatrix<f64>,
    pub converged: ConvergenceDiag,
    pub loglik_pen: f64,
    /// Seeds consumed while fitting, in order.
    pub seed_chain: Vec<u64>,
    /// Hash of basis and data, hex; used to detect mismatched inputs.
    pub data_hash: String,
}

impl FittedModel {
    /// `λ̂_k = ‖β̂_k‖²` in normalised (descending) order.
    pub fn lambdas(&self) -> Vec<f64> {
        self.coefs.lambdas()
    }

    /// `μ̂_i` (or its derivative) on a grid; extrapolates linearly beyond the
    /// basis domain.
    pub fn predict_trajectory(
        &self,
        subject: usize,
        times: &[f64],
        deriv: usize,
    ) -> Result<Vec<f64>> {
        if subject >= self.scores.nrows() {
            return Err(Error::UnknownSubject(subject));
        }
        let mut delta = self.params.beta0.clone();
        for (k, b) in self.coefs.betas.iter().enumerate() {
            delta += b * self.scores[(subject, k)];
        }
        Ok(times
            .iter()
            .map(|&t| self.basis.eval(t, deriv).dot(&delta))
            .collect())
    }

    /// Population mean curve `f̂₀` (or derivative) on a grid.
    pub fn mean_curve(&self, times: &[f64], deriv: usize) -> Vec<f64> {
        times
            .iter()
            .map(|&t| self.basis.eval(t, deriv).dot(&self.params.beta0))
            .collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.scores.nrows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Combined hash of the basis definition and the data content.
pub fn model_data_hash(basis: &crate::basis::OrthoBasis, data: &crate::data::LongitudinalDataset) -> String {
    let mut h = Fnv::new();
    h.write_u64(basis.content_hash());
    h.write_u64(data.content_hash());
    format!("{:016x}", h.finish())
}

fn hash_from_blocks(obj: &PenalizedObjective, subject_ids: &[String]) -> String {
    // recompute the data hash from blocks (y and design-derived times are not
    // recoverable; callers that have the dataset should prefer model_data_hash)
    let mut h = Fnv::new();
    h.write_u64(obj.basis.content_hash());
    h.write_u64(subject_ids.len() as u64);
    for (id, b) in subject_ids.iter().zip(&obj.blocks) {
        h.write_bytes(id.as_bytes());
        h.write_u64(b.y.len() as u64);
        for v in b.y.iter() {
            h.write_u64(v.to_bits());
        }
    }
    format!("{:016x}", h.finish())
}

/// Maximise `ℓ_p` for fixed `(K, γ)`.
///
/// On convergence failure after all restarts, returns
/// [`Error::Convergence`] carrying the best parameters found.
pub fn maximize(
    obj: &PenalizedObjective,
    k: usize,
    init: Option<ParamVector>,
    opts: &FitOptions,
) -> Result<FittedModel> {
    maximize_named(obj, k, init, opts, &default_ids(obj))
}

fn default_ids(obj: &PenalizedObjective) -> Vec<String> {
    (0..obj.n_subjects()).map(|i| i.to_string()).collect()
}

pub(crate) fn maximize_named(
    obj: &PenalizedObjective,
    k: usize,
    init: Option<ParamVector>,
    opts: &FitOptions,
    subject_ids: &[String],
) -> Result<FittedModel> {
    let n_basis = obj.basis.n_basis();
    let mut seed_chain = Vec::new();
    let init = match init {
        Some(p) => {
            if p.n_basis() != n_basis || p.k() != k {
                return Err(Error::InvalidArgument(
                    "warm-start parameters do not match (K, n_basis)".into(),
                ));
            }
            p
        }
        None => {
            let (beta0, log_sigma) = k0_init(obj)?;
            let seed = rng::derive_seed(opts.seed, k as u64);
            seed_chain.push(seed);
            let alphas = draw_alphas(n_basis, k, seed);
            ParamVector::new(beta0, alphas, log_sigma)?
        }
    };

    let mut best: Option<(f64, bfgs::BfgsOutcome)> = None;
    let mut restarts_used = 0;
    let mut attempt_init = init.clone();
    for attempt in 0..=opts.restarts {
        let outcome = run_bfgs(obj, k, &attempt_init, opts)?;
        let accept = outcome.converged && !order_suspect(obj, k, &outcome.x)?;
        let val = -outcome.f;
        if best.as_ref().map_or(true, |(bv, _)| val > *bv) {
            best = Some((val, outcome));
        }
        if accept {
            break;
        }
        if attempt == opts.restarts {
            break;
        }
        restarts_used += 1;
        let seed = rng::derive_seed(opts.seed, 1_000 + attempt as u64 * 31 + k as u64);
        seed_chain.push(seed);
        attempt_init = ParamVector::new(
            init.beta0.clone(),
            draw_alphas(n_basis, k, seed),
            init.log_sigma,
        )?;
    }
    let (_, outcome) = best.unwrap();
    let params = ParamVector::from_flat(&outcome.x, n_basis, k)?;
    let diag = ConvergenceDiag {
        converged: outcome.converged,
        iterations: outcome.iterations,
        grad_norm: outcome.grad.amax(),
        restarts: restarts_used,
        message: outcome.message.clone(),
    };
    if !outcome.converged {
        return Err(Error::Convergence {
            message: diag.message.clone(),
            restarts: restarts_used,
            best: outcome.x.iter().copied().collect(),
            grad_norm: diag.grad_norm,
        });
    }
    build_model(obj, params, diag, -outcome.f, seed_chain, subject_ids)
}

fn run_bfgs(
    obj: &PenalizedObjective,
    k: usize,
    init: &ParamVector,
    opts: &FitOptions,
) -> Result<bfgs::BfgsOutcome> {
    let n_basis = obj.basis.n_basis();
    let eval = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        let p = ParamVector::from_flat(x, n_basis, k).ok()?;
        let f = model::penalized_log_likelihood(&p, obj).ok()?;
        let g = model::gradient(&p, obj).ok()?;
        Some((-f, -g))
    };
    bfgs::minimize(
        eval,
        init.to_flat(),
        &BfgsOptions {
            grad_tol: opts.grad_tol,
            max_iter: opts.max_iter,
        },
    )
    .ok_or_else(|| Error::InvalidArgument("objective undefined at the starting point".into()))
}

/// Suspected label swap into a poor basin: the newest component carries an
/// order of magnitude more variance than its predecessor.
fn order_suspect(obj: &PenalizedObjective, k: usize, x: &DVector<f64>) -> Result<bool> {
    if k < 2 {
        return Ok(false);
    }
    let p = ParamVector::from_flat(x, obj.basis.n_basis(), k)?;
    let coefs = orthoparam::expand(&p, obj.basis.penalty());
    let lams = coefs.lambdas();
    Ok(lams[k - 1] > 10.0 * lams[k - 2])
}

fn draw_alphas(n_basis: usize, k: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut r = rng::stream_rng(seed, 0);
    (1..=k)
        .map(|kk| {
            DVector::from_fn(alpha_dim(n_basis, kk), |_, _| {
                NEW_ALPHA_SD * rng::normal(&mut r)
            })
        })
        .collect()
}

/// `K = 0` closed-form initialisation: penalised least squares for `β₀` over
/// the stacked subjects, `log σ` from the residual standard deviation.
fn k0_init(obj: &PenalizedObjective) -> Result<(DVector<f64>, f64)> {
    let n_basis = obj.basis.n_basis();
    let mut xtx = DMatrix::<f64>::zeros(n_basis, n_basis);
    let mut xty = DVector::<f64>::zeros(n_basis);
    let mut n_total = 0usize;
    for b in &obj.blocks {
        xtx += b.design.transpose() * &b.design;
        xty += b.design.transpose() * &b.y;
        n_total += b.n_obs();
    }
    let mut a = xtx + obj.basis.penalty() * obj.gamma;
    let chol = match Cholesky::new(a.clone()) {
        Some(c) => c,
        None => {
            let ridge = 1e-8 * a.trace().max(1.0);
            for i in 0..n_basis {
                a[(i, i)] += ridge;
            }
            Cholesky::new(a).ok_or_else(|| {
                Error::DegenerateDesign("normal equations not positive definite".into())
            })?
        }
    };
    let beta0 = chol.solve(&xty);
    let mut rss = 0.0;
    for b in &obj.blocks {
        let r = &b.y - &b.design * &beta0;
        rss += r.norm_squared();
    }
    let sigma2 = (rss / n_total as f64).max(1e-12);
    Ok((beta0, 0.5 * sigma2.ln()))
}

fn build_model(
    obj: &PenalizedObjective,
    params: ParamVector,
    diag: ConvergenceDiag,
    loglik_pen: f64,
    seed_chain: Vec<u64>,
    subject_ids: &[String],
) -> Result<FittedModel> {
    let penalty = obj.basis.penalty();
    let raw = orthoparam::expand(&params, penalty);
    let norm = orthoparam::normalize_fit(&raw, penalty, obj.basis.moments());
    let sigma2_hat = params.sigma2();
    let scores = scores_from_parts(&params.beta0, &norm.coefs.betas, sigma2_hat, obj)?;
    let hessian = hessian_fd(obj, &params)?;
    Ok(FittedModel {
        format_version: 1,
        basis: obj.basis.clone(),
        coefs: norm.coefs,
        sigma2_hat,
        k: params.k(),
        gamma: obj.gamma,
        subject_ids: subject_ids.to_vec(),
        scores,
        hessian,
        converged: diag,
        loglik_pen,
        seed_chain,
        data_hash: hash_from_blocks(obj, subject_ids),
        params,
    })
}

/// Central-difference Hessian of `ℓ_p` from the exact gradient,
/// step `1e-5 (1 + |θ_j|)`, symmetrised.
pub fn hessian_fd(obj: &PenalizedObjective, params: &ParamVector) -> Result<DMatrix<f64>> {
    let flat = params.to_flat();
    let p = flat.len();
    let n_basis = params.n_basis();
    let k = params.k();
    let mut h = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * (1.0 + flat[j].abs());
        let mut fp = flat.clone();
        fp[j] += step;
        let mut fm = flat.clone();
        fm[j] -= step;
        let gp = model::gradient(&ParamVector::from_flat(&fp, n_basis, k)?, obj)?;
        let gm = model::gradient(&ParamVector::from_flat(&fm, n_basis, k)?, obj)?;
        let col = (gp - gm) / (2.0 * step);
        h.set_column(j, &col);
    }
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Conditional-mean (BLUP) scores `û_i = F̂_i' Σ̂_i⁻¹ (y_i − f̂₀ᵢ)` under
/// `u_i ~ N(0, I_K)`.
pub fn estimate_scores(model: &FittedModel, obj: &PenalizedObjective) -> Result<DMatrix<f64>> {
    scores_from_parts(
        &model.params.beta0,
        &model.coefs.betas,
        model.sigma2_hat,
        obj,
    )
}

pub(crate) fn scores_from_parts(
    beta0: &DVector<f64>,
    betas: &[DVector<f64>],
    sigma2: f64,
    obj: &PenalizedObjective,
) -> Result<DMatrix<f64>> {
    let k = betas.len();
    let d = obj.n_subjects();
    let mut scores = DMatrix::<f64>::zeros(d, k);
    for (i, block) in obj.blocks.iter().enumerate() {
        let r = &block.y - &block.design * beta0;
        let mut f = DMatrix::zeros(block.n_obs(), k);
        for (j, b) in betas.iter().enumerate() {
            f.set_column(j, &(&block.design * b));
        }
        let cov = model::subject_covariance(sigma2, f.clone())?;
        let u = f.transpose() * cov.solve_vec(&r);
        for j in 0..k {
            scores[(i, j)] = u[j];
        }
    }
    Ok(scores)
}

/// Result of fitting `K = 0..=k_max` with warm starts; stops early on failure.
#[derive(Debug)]
pub struct FitSequence {
    pub models: Vec<FittedModel>,
    /// `(K, message)` of the first failure, if any.
    pub failure: Option<(usize, String)>,
}

impl FitSequence {
    pub fn sigma2_table(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.sigma2_hat).collect()
    }
}

/// Fit `K = 0, 1, …, k_max`, each warm-started from its predecessor with the
/// new component's coordinates drawn near zero.
pub fn fit_sequence(obj: &PenalizedObjective, k_max: usize, opts: &FitOptions) -> FitSequence {
    fit_sequence_named(obj, k_max, opts, &default_ids(obj))
}

pub(crate) fn fit_sequence_named(
    obj: &PenalizedObjective,
    k_max: usize,
    opts: &FitOptions,
    subject_ids: &[String],
) -> FitSequence {
    let mut models = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        match extend_sequence(obj, &models, k, opts, subject_ids) {
            Ok(m) => models.push(m),
            Err(e) => {
                return FitSequence {
                    models,
                    failure: Some((k, e.to_string())),
                }
            }
        }
    }
    FitSequence {
        models,
        failure: None,
    }
}

/// Fit component count `k`, warm-starting from the last entry of `models`
/// (which must hold `K = k - 1`) when available.
pub(crate) fn extend_sequence(
    obj: &PenalizedObjective,
    models: &[FittedModel],
    k: usize,
    opts: &FitOptions,
    subject_ids: &[String],
) -> Result<FittedModel> {
    let init = match models.last() {
        Some(prev) if prev.k + 1 == k => {
            let seed = rng::derive_seed(opts.seed, 500 + k as u64);
            let mut r = rng::stream_rng(seed, 0);
            let new_alpha = DVector::from_fn(alpha_dim(obj.basis.n_basis(), k), |_, _| {
                NEW_ALPHA_SD * rng::normal(&mut r)
            });
            let mut alphas = prev.params.alphas.clone();
            alphas.push(new_alpha);
            Some(ParamVector::new(
                prev.params.beta0.clone(),
                alphas,
                prev.params.log_sigma,
            )?)
        }
        Some(prev) if prev.k == k => Some(prev.params.clone()),
        _ => None,
    };
    maximize_named(obj, k, init, opts, subject_ids)
}
