//! Shared oracle machinery for the integration suites. Everything here is an
//! independent checking path: it must not reuse the library's implementation
//! shortcuts.
#![allow(dead_code)] // each test binary uses its own subset

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Dense multivariate-normal log density via Cholesky, no Woodbury.
pub fn dense_mvn_loglik(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = nalgebra::Cholesky::new(cov.clone()).expect("oracle covariance SPD");
    let mut logdet = 0.0;
    for i in 0..y.len() {
        logdet += chol.l_dirty()[(i, i)].ln();
    }
    let r = y - mean;
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + 2.0 * logdet + quad)
}

/// Minimum-cost perfect matching on a square cost matrix given row-major
/// (Hungarian algorithm with potentials). Returns the assignment column for
/// each row.
pub fn min_cost_assignment_flat(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut flat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            flat[i * n + j] = cost[(i, j)];
        }
    }
    min_cost_assignment_flat(&flat, n)
}

/// Empirical squared 2-Wasserstein distance between two equal-size point
/// clouds: exact optimal matching of squared Euclidean costs, averaged.
pub fn empirical_w2_squared(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = (&a[i] - &b[j]).norm_squared();
        }
    }
    let assign = min_cost_assignment_flat(&cost, n);
    (0..n).map(|i| cost[i * n + assign[i]]).sum::<f64>() / n as f64
}

/// Sample `n` points from `N(mean, A A')` where the factor `A` is `p × r`.
pub fn sample_gaussian(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<DVector<f64>> {
    let r = factor.ncols();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(r, |_, _| hmfpc::rng::normal(rng));
            mean + factor * z
        })
        .collect()
}

/// Deterministic uniform draw helper for fixtures.
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
