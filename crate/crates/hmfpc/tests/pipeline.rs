//! Cross-module integration checks that exercise the full estimation pipeline
//! against independent oracles.

mod support;

use hmfpc::*;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Adaptive Simpson quadrature.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let c = 0.5 * (a + b);
    let fa = f(a);
    let fb = f(b);
    let fc = f(c);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let c = 0.5 * (a + b);
    let d = 0.5 * (a + c);
    let e = 0.5 * (c + b);
    let fd = f(d);
    let fe = f(e);
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
        left + right + (left + right - whole) / 15.0
    } else {
        simpson_step(f, a, c, fa, fc, fd, left, tol / 2.0, depth - 1)
            + simpson_step(f, c, b, fc, fb, fe, right, tol / 2.0, depth - 1)
    }
}

/// The marginal-likelihood criterion at `K = 0` against numerical integration:
/// the coefficient block integrates in closed form (conjugate Gaussian), the
/// log-scale noise coordinate by adaptive quadrature.
#[test]
fn laml_matches_quadrature_oracle_at_k0() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let mut data = LongitudinalDataset::new();
    for i in 0..2 {
        for _ in 0..10 {
            let t: f64 = rng.random_range(0.0..1.0);
            let y = 1.0 + t + 0.3 * hmfpc::rng::normal(&mut rng);
            data.push(&format!("s{i}"), t, y);
        }
    }
    let n_basis = 4;
    let basis = OrthoBasis::build(&data.pooled_times(), n_basis).unwrap();
    let gamma = 2.0;
    let obj = PenalizedObjective::new(basis.clone(), &data, gamma).unwrap();
    let seq = fit_sequence(&obj, 0, &FitOptions::default());
    assert!(seq.failure.is_none());
    let criterion = approx_log_marginal_likelihood(&seq.models[0], &obj).unwrap();

    // oracle
    let n_total = obj.n_obs();
    let mut xtx = DMatrix::<f64>::zeros(n_basis, n_basis);
    let mut xty = DVector::<f64>::zeros(n_basis);
    let mut yty = 0.0;
    for b in &obj.blocks {
        xtx += b.design.transpose() * &b.design;
        xty += b.design.transpose() * &b.y;
        yty += b.y.norm_squared();
    }
    let a = &xtx + basis.penalty() * gamma;
    let chol = Cholesky::new(a.clone()).unwrap();
    let q = yty - xty.dot(&chol.solve(&xty));
    let mut log_det_a = 0.0;
    for i in 0..n_basis {
        log_det_a += 2.0 * chol.l_dirty()[(i, i)].ln();
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let log_inner = move |ls: f64| -> f64 {
        let s2 = (2.0 * ls).exp();
        0.5 * (n_basis as f64 - n_total as f64) * (ln_2pi + s2.ln()) - 0.5 * log_det_a
            - q / (2.0 * s2)
    };
    // normalize by the peak for a stable integral
    let peak = (-60..30)
        .map(|i| log_inner(i as f64 * 0.1))
        .fold(f64::NEG_INFINITY, f64::max);
    let integrand = move |ls: f64| (log_inner(ls) - peak).exp();
    let integral = adaptive_simpson(&integrand, -6.0, 3.0, 1e-12, 40);
    // remainder term of the prior beyond the quadratic penalty
    let eig = basis.penalty().clone().symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let rank = n_basis - 2;
    let r_term: f64 = ev.iter().take(rank).map(|e| 0.5 * e.ln()).sum::<f64>()
        + rank as f64 * (gamma.ln() - 1.0);
    let oracle = r_term + peak + integral.ln();
    let diff = (criterion - oracle).abs();
    assert!(
        diff < 0.5,
        "criterion {criterion} vs quadrature {oracle} ({diff} nats)"
    );
}

/// Doubling the data shifts the criterion by roughly the added data's
/// log-likelihood (sanity check on the criterion's scaling, not an equality).
#[test]
fn laml_scales_with_data_size() {
    let opts = FitOptions::default();
    let fit_at = |d: usize| {
        let sim = generate(&SimSpec::new(Dgp::LmmRi, d, 5, 31));
        let basis = OrthoBasis::build(&sim.data.pooled_times(), 8).unwrap();
        let obj = PenalizedObjective::new(basis, &sim.data, 1.0).unwrap();
        let seq = fit_sequence(&obj, 1, &opts);
        let m = seq.models.into_iter().nth(1).unwrap();
        let c = approx_log_marginal_likelihood(&m, &obj).unwrap();
        (c, m.loglik_pen)
    };
    let (c1, l1) = fit_at(150);
    let (c2, l2) = fit_at(300);
    let delta = c2 - c1;
    let added = l2 - l1;
    assert!(
        (delta - added).abs() <= 0.5 * added.abs() + 25.0,
        "criterion shift {delta} vs added log-likelihood {added}"
    );
}

/// Adding a constant to every response shifts fitted trajectories and bands
/// by that constant, within optimizer tolerance.
#[test]
fn translation_equivariance_of_bands() {
    let shift = 5.0;
    let run = |offset: f64| {
        let sim = generate(&SimSpec::new(Dgp::LmmRi, 40, 5, 77));
        let mut data = LongitudinalDataset::new();
        for s in sim.data.subjects() {
            for (t, y) in s.times.iter().zip(&s.values) {
                data.push(&s.id, *t, *y + offset);
            }
        }
        let basis = OrthoBasis::build(&data.pooled_times(), 8).unwrap();
        let opts = FitOptions::default();
        let obj = PenalizedObjective::new(basis, &data, 1.0).unwrap();
        let seq = fit_sequence(&obj, 1, &opts);
        let m = seq.models.into_iter().nth(1).unwrap();
        let sample = draw_bootstrap(&m, &obj, 400, 5).unwrap();
        let grid = [0.2, 0.5, 0.8];
        let band = confidence_band(&sample, &m.basis, 0, &grid, 0.95, 0).unwrap();
        let est = m.predict_trajectory(0, &grid, 0).unwrap();
        (est, band)
    };
    let (est0, band0) = run(0.0);
    let (est1, band1) = run(shift);
    for i in 0..est0.len() {
        assert!(
            (est1[i] - est0[i] - shift).abs() < 1e-2,
            "prediction shift {} vs {}",
            est1[i] - est0[i],
            shift
        );
        assert!((band1.lower[i] - band0.lower[i] - shift).abs() < 2e-2);
        assert!((band1.upper[i] - band0.upper[i] - shift).abs() < 2e-2);
    }
}

/// At large d the fitted component span recovers the generating span: the
/// principal angle between them is small.
#[test]
fn component_subspace_recovery_at_scale() {
    let sim = generate(&SimSpec::new(Dgp::TwoFpc, 500, 10, 99));
    let basis = OrthoBasis::build(&sim.data.pooled_times(), 10).unwrap();
    let obj = PenalizedObjective::new(basis.clone(), &sim.data, 1.0).unwrap();
    let opts = FitOptions::default();
    let seq = fit_sequence(&obj, 2, &opts);
    assert!(seq.failure.is_none(), "{:?}", seq.failure);
    let m = &seq.models[2];
    // project the generating directions (the shared curve and the constant)
    // onto the basis by quadrature
    let (lo, hi) = basis.domain();
    let quad_grid: Vec<f64> = (0..400).map(|i| lo + (hi - lo) * i as f64 / 399.0).collect();
    let project = |f: &dyn Fn(f64) -> f64| -> DVector<f64> {
        let h = (hi - lo) / 399.0;
        let mut acc = DVector::zeros(10);
        for &t in &quad_grid {
            acc += basis.eval(t, 0) * (f(t) * h);
        }
        acc
    };
    let g1 = project(&|t| t / 2.0 + t.sin());
    let g2 = project(&|_| 1.0);
    let truth = DMatrix::from_columns(&[g1, g2]);
    let fitted = DMatrix::from_columns(&[m.coefs.betas[0].clone(), m.coefs.betas[1].clone()]);
    let qt = truth.qr().q();
    let qf = fitted.qr().q();
    let svd = (qt.transpose() * qf).svd(false, false);
    let min_sv = svd.singular_values.min().min(1.0);
    let angle = min_sv.acos();
    assert!(angle < 0.1, "principal angle {angle} rad");
}

/// The marginal-likelihood choice of the smoothing parameter is close in
/// trajectory error to the best grid point.
#[test]
fn gamma_choice_is_near_best_rmise() {
    let replicates = 20;
    let grid_g = hmfpc::tuning::default_gamma_grid();
    let mut mise_chosen = 0.0;
    let mut mise_best = 0.0;
    for rep in 0..replicates {
        let spec = SimSpec::new(Dgp::TwoFpc, 50, 5, hmfpc::rng::derive_seed(404, rep));
        let sim = generate(&spec);
        let basis = OrthoBasis::build(&sim.data.pooled_times(), 10).unwrap();
        let opts = FitOptions {
            seed: spec.seed,
            ..FitOptions::default()
        };
        let (lo, hi) = basis.domain();
        let grid_t = hmfpc::population::default_grid((lo, hi), 100);
        let mise_of = |model: &FittedModel| -> f64 {
            let mut acc = 0.0;
            for i in 0..sim.data.n_subjects() {
                let est = model.predict_trajectory(i, &grid_t, 0).unwrap();
                let truth: Vec<f64> = grid_t.iter().map(|&t| sim.truth_at(i, t)).collect();
                acc += ise(&grid_t, &est, &truth).unwrap();
            }
            acc / sim.data.n_subjects() as f64
        };
        let mut per_gamma = Vec::new();
        for &g in &grid_g {
            let obj = PenalizedObjective::new(basis.clone(), &sim.data, g).unwrap();
            let Ok(sel) = select_k(&obj, 0.999, &opts) else {
                per_gamma.push(None);
                continue;
            };
            let model = &sel.fits[sel.k];
            let crit = approx_log_marginal_likelihood(model, &obj).ok();
            per_gamma.push(crit.map(|c| (c, mise_of(model))));
        }
        let chosen = per_gamma
            .iter()
            .flatten()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .expect("at least one valid gamma");
        let best = per_gamma
            .iter()
            .flatten()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        mise_chosen += chosen.1 / replicates as f64;
        mise_best += best.1 / replicates as f64;
    }
    let rmise_chosen = mise_chosen.sqrt();
    let rmise_best = mise_best.sqrt();
    assert!(
        rmise_chosen <= 1.5 * rmise_best,
        "chosen RMISE {rmise_chosen} vs best grid point {rmise_best}"
    );
}

/// Per-replicate failures are recorded without aborting the rest of the grid.
#[test]
fn benchmark_records_failures_and_continues() {
    let cells = vec![
        // too few observations for the basis dimension: every replicate fails
        SimSpec::new(Dgp::TwoFpc, 3, 2, 11),
        SimSpec::new(Dgp::TwoFpc, 30, 5, 11),
    ];
    let cfg = BenchmarkConfig {
        gamma_grid: vec![1.0],
        n_s: 150,
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark(&cells, 2, &cfg);
    assert_eq!(
        report.failures.iter().filter(|f| f.d == 3).count(),
        2,
        "both bad-cell replicates recorded"
    );
    assert!(
        report.rows.iter().any(|r| r.d == 30 && r.metric == "rmise"),
        "healthy cell still aggregated"
    );
    assert!(report.rows.iter().all(|r| r.d != 3));
}

/// Derivative bands on random-intercept data surround the generating slope.
#[test]
fn derivative_bands_cover_slope() {
    let sim = generate(&SimSpec::new(Dgp::LmmRi, 100, 8, 55));
    let basis = OrthoBasis::build(&sim.data.pooled_times(), 8).unwrap();
    let opts = FitOptions::default();
    let obj = PenalizedObjective::new(basis, &sim.data, 1.0).unwrap();
    let seq = fit_sequence(&obj, 1, &opts);
    let m = seq.models.into_iter().nth(1).unwrap();
    let sample = draw_bootstrap(&m, &obj, 300, 17).unwrap();
    let grid = [0.3, 0.5, 0.7];
    for subject in [0usize, 3, 7] {
        let est = m.predict_trajectory(subject, &grid, 1).unwrap();
        let band = confidence_band(&sample, &m.basis, subject, &grid, 0.95, 1).unwrap();
        for i in 0..grid.len() {
            assert!(
                (est[i] - 2.0).abs() < 0.8,
                "derivative estimate {} far from the generating slope 2",
                est[i]
            );
            assert!(band.lower[i] <= band.upper[i]);
        }
    }
}
