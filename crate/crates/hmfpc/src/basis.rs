//! Orthonormal cubic-spline basis over the observed time range.
//!
//! Raw cubic B-splines are placed on knots at equally-spaced quantiles of the
//! pooled observation times, then orthonormalised against the exact
//! piecewise-polynomial inner product `<f, g> = ∫ f g dt` over the domain.
//! All integrals use 7-point Gauss-Legendre per knot interval, which is exact
//! for the piecewise degree-6 integrands that occur here. The curvature
//! penalty matrix `S`, with `w(f) = β' S β = ∫ f''(t)² dt`, is carried in the
//! orthonormal coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 7-point Gauss-Legendre nodes on [-1, 1].
const GL_NODES: [f64; 7] = [
    -0.949_107_912_342_758_5,
    -0.741_531_185_599_394_4,
    -0.405_845_151_377_397_17,
    0.0,
    0.405_845_151_377_397_17,
    0.741_531_185_599_394_4,
    0.949_107_912_342_758_5,
];

/// Matching Gauss-Legendre weights.
const GL_WEIGHTS: [f64; 7] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
    0.381_830_050_505_118_94,
    0.279_705_391_489_276_7,
    0.129_484_966_168_869_7,
];

pub const SPLINE_DEGREE: usize = 3;

/// Design matrix for one subject: row `j` is `b(t_ij)'`.
pub type DesignMatrix = DMatrix<f64>;

/// Orthonormal cubic-spline basis with its curvature penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthoBasis {
    n_basis: usize,
    /// Unique knots, boundary knots first/last, strictly increasing.
    knots: Vec<f64>,
    /// Row `k` holds the raw-B-spline coefficients of orthonormal function `b_k`.
    transform: DMatrix<f64>,
    /// Penalty matrix in orthonormal coordinates: `w(f) = β' S β`.
    penalty: DMatrix<f64>,
    domain: (f64, f64),
    /// `∫ b_k(t) dt` for each orthonormal function; used by the sign convention.
    moments: DVector<f64>,
}

impl OrthoBasis {
    /// Build the basis from pooled observation times.
    ///
    /// Interior knots sit at equally-spaced quantiles of the pooled times;
    /// boundary knots at the min/max.
    pub fn build(times: &[f64], n_basis: usize) -> Result<Self> {
        if n_basis < 4 {
            return Err(Error::InvalidArgument(format!(
                "n_basis must be at least 4, got {n_basis}"
            )));
        }
        let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
        if sorted.len() != times.len() {
            return Err(Error::InvalidArgument("non-finite time value".into()));
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < n_basis {
            return Err(Error::DegenerateDesign(format!(
                "need at least {n_basis} distinct times, got {}",
                distinct.len()
            )));
        }
        let lo = sorted[0];
        let hi = *sorted.last().unwrap();
        let m = n_basis - 4;
        let mut knots = Vec::with_capacity(m + 2);
        knots.push(lo);
        for i in 1..=m {
            knots.push(quantile(&sorted, i as f64 / (m + 1) as f64));
        }
        knots.push(hi);
        for w in knots.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::DegenerateDesign(format!(
                    "knots not strictly increasing near t = {}",
                    w[0]
                )));
            }
        }
        Self::from_knots(knots)
    }

    /// Build from an explicit strictly-increasing unique-knot sequence
    /// (boundaries included). `n_basis = knots.len() + 2`.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        let n_basis = knots.len() + 2;
        let padded = pad_knots(&knots);
        let (qx, qw) = quad_points(&knots);
        let nq = qx.len();
        let mut b0 = DMatrix::zeros(nq, n_basis);
        let mut b2 = DMatrix::zeros(nq, n_basis);
        for (r, &x) in qx.iter().enumerate() {
            let (v, _, d2) = raw_all(&padded, x);
            for c in 0..n_basis {
                b0[(r, c)] = v[c];
                b2[(r, c)] = d2[c];
            }
        }
        let mut gram = DMatrix::zeros(n_basis, n_basis);
        let mut s_raw = DMatrix::zeros(n_basis, n_basis);
        for r in 0..nq {
            let w = qw[r];
            for i in 0..n_basis {
                for j in 0..=i {
                    gram[(i, j)] += w * b0[(r, i)] * b0[(r, j)];
                    s_raw[(i, j)] += w * b2[(r, i)] * b2[(r, j)];
                }
            }
        }
        for i in 0..n_basis {
            for j in (i + 1)..n_basis {
                gram[(i, j)] = gram[(j, i)];
                s_raw[(i, j)] = s_raw[(j, i)];
            }
        }
        let transform = orthonormalize(&gram)?;
        let mut penalty = &transform * &s_raw * transform.transpose();
        symmetrize(&mut penalty);
        // roundoff can leave eigenvalues a hair below zero at large penalty
        // scales; clamp them so S is positive-semidefinite exactly
        let eig = penalty.clone().symmetric_eigen();
        if eig.eigenvalues.min() < 0.0 {
            let n = penalty.nrows();
            penalty = DMatrix::zeros(n, n);
            for k in 0..n {
                let lam = eig.eigenvalues[k];
                if lam > 0.0 {
                    let v = eig.eigenvectors.column(k);
                    penalty += v * v.transpose() * lam;
                }
            }
            symmetrize(&mut penalty);
        }
        let mut raw_integrals = DVector::zeros(n_basis);
        for r in 0..nq {
            for c in 0..n_basis {
                raw_integrals[c] += qw[r] * b0[(r, c)];
            }
        }
        let moments = &transform * raw_integrals;
        let domain = (knots[0], *knots.last().unwrap());
        Ok(Self {
            n_basis,
            knots,
            transform,
            penalty,
            domain,
            moments,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// `∫ b_k dt` over the domain, one entry per basis function.
    pub fn moments(&self) -> &DVector<f64> {
        &self.moments
    }

    /// Evaluate the orthonormal basis (or a derivative) at `t`, extrapolating
    /// linearly beyond the boundary knots: value and first derivative continue,
    /// second derivative is zero.
    pub fn eval(&self, t: f64, deriv: usize) -> DVector<f64> {
        let (lo, hi) = self.domain;
        if t >= lo && t <= hi {
            return self.eval_in_domain(t, deriv);
        }
        let tb = if t < lo { lo } else { hi };
        match deriv {
            0 => {
                let v = self.eval_in_domain(tb, 0);
                let d = self.eval_in_domain(tb, 1);
                v + d * (t - tb)
            }
            1 => self.eval_in_domain(tb, 1),
            _ => DVector::zeros(self.n_basis),
        }
    }

    /// Evaluate requiring `t` to lie inside the domain.
    pub fn eval_strict(&self, t: f64, deriv: usize) -> Result<DVector<f64>> {
        let (lo, hi) = self.domain;
        if t < lo || t > hi || !t.is_finite() {
            return Err(Error::Domain { t, lo, hi });
        }
        Ok(self.eval_in_domain(t, deriv))
    }

    fn eval_in_domain(&self, t: f64, deriv: usize) -> DVector<f64> {
        assert!(deriv <= 2, "derivative order must be 0, 1 or 2");
        let padded = pad_knots(&self.knots);
        let (v, d1, d2) = raw_all(&padded, t);
        let raw = match deriv {
            0 => v,
            1 => d1,
            _ => d2,
        };
        &self.transform * DVector::from_vec(raw)
    }

    /// Design matrix for one subject's observation times (strict domain).
    pub fn design_matrix(&self, subject_times: &[f64]) -> Result<DesignMatrix> {
        if subject_times.is_empty() {
            return Err(Error::EmptySubject { subject: 0 });
        }
        let mut x = DMatrix::zeros(subject_times.len(), self.n_basis);
        for (r, &t) in subject_times.iter().enumerate() {
            let row = self.eval_strict(t, 0)?;
            x.row_mut(r).copy_from(&row.transpose());
        }
        Ok(x)
    }

    /// Design matrix on an arbitrary grid, extrapolating beyond the domain.
    pub fn design_matrix_extrapolating(&self, times: &[f64], deriv: usize) -> DesignMatrix {
        let mut x = DMatrix::zeros(times.len(), self.n_basis);
        for (r, &t) in times.iter().enumerate() {
            let row = self.eval(t, deriv);
            x.row_mut(r).copy_from(&row.transpose());
        }
        x
    }

    /// Quadrature inner product `∫ f^(deriv) g^(deriv) dt` of two functions
    /// given by orthonormal-basis coefficients. Independent recomputation path
    /// used by checks; `deriv = 0` recovers the Gram inner product.
    pub fn inner_product(&self, a: &DVector<f64>, b: &DVector<f64>, deriv: usize) -> f64 {
        let (qx, qw) = quad_points(&self.knots);
        let mut acc = 0.0;
        for (x, w) in qx.iter().zip(&qw) {
            let row = self.eval_in_domain(*x, deriv);
            acc += w * a.dot(&row) * b.dot(&row);
        }
        acc
    }

    /// Gram matrix of the orthonormal basis, recomputed by quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.n_basis;
        let (qx, qw) = quad_points(&self.knots);
        let mut g = DMatrix::zeros(n, n);
        for (x, w) in qx.iter().zip(&qw) {
            let row = self.eval_in_domain(*x, 0);
            g += row.clone() * row.transpose() * *w;
        }
        g
    }

    /// FNV hash of the basis definition, used in model/data integrity checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::data::Fnv::new();
        h.write_u64(self.n_basis as u64);
        for &k in &self.knots {
            h.write_u64(k.to_bits());
        }
        h.finish()
    }
}

/// Type-7 quantile of a sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let i = h.floor() as usize;
    let frac = h - i as f64;
    if i + 1 < n {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[n - 1]
    }
}

fn pad_knots(knots: &[f64]) -> Vec<f64> {
    let lo = knots[0];
    let hi = *knots.last().unwrap();
    let mut padded = Vec::with_capacity(knots.len() + 2 * SPLINE_DEGREE);
    padded.extend(std::iter::repeat(lo).take(SPLINE_DEGREE));
    padded.extend_from_slice(knots);
    padded.extend(std::iter::repeat(hi).take(SPLINE_DEGREE));
    padded
}

/// Gauss-Legendre nodes/weights tiling the knot intervals.
pub(crate) fn quad_points(knots: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(7 * (knots.len() - 1));
    let mut ws = Vec::with_capacity(xs.capacity());
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let half = 0.5 * (w[1] - w[0]);
        for i in 0..7 {
            xs.push(mid + half * GL_NODES[i]);
            ws.push(half * GL_WEIGHTS[i]);
        }
    }
    (xs, ws)
}

/// Degree-`p` B-spline values at `t` on the padded knot vector, all indices.
fn values_degree(padded: &[f64], p: usize, t: f64) -> Vec<f64> {
    let n0 = padded.len() - 1;
    let mut b = vec![0.0; n0];
    let hi = *padded.last().unwrap();
    if t >= hi {
        // right boundary belongs to the last non-empty interval
        for j in (0..n0).rev() {
            if padded[j] < padded[j + 1] {
                b[j] = 1.0;
                break;
            }
        }
    } else {
        for j in 0..n0 {
            if padded[j] <= t && t < padded[j + 1] {
                b[j] = 1.0;
                break;
            }
        }
    }
    for deg in 1..=p {
        let len = n0 - deg;
        let mut nb = vec![0.0; len];
        for j in 0..len {
            let d1 = padded[j + deg] - padded[j];
            let d2 = padded[j + deg + 1] - padded[j + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += (t - padded[j]) / d1 * b[j];
            }
            if d2 > 0.0 {
                v += (padded[j + deg + 1] - t) / d2 * b[j + 1];
            }
            nb[j] = v;
        }
        b = nb;
    }
    b
}

/// Derivative of degree-`p` values from degree-`p-1` values.
fn derivative_step(padded: &[f64], p: usize, lower: &[f64]) -> Vec<f64> {
    let len = lower.len() - 1;
    let mut d = vec![0.0; len];
    for j in 0..len {
        let d1 = padded[j + p] - padded[j];
        let d2 = padded[j + p + 1] - padded[j + 1];
        let mut v = 0.0;
        if d1 > 0.0 {
            v += lower[j] / d1;
        }
        if d2 > 0.0 {
            v -= lower[j + 1] / d2;
        }
        d[j] = p as f64 * v;
    }
    d
}

/// Values, first and second derivatives of all raw cubic B-splines at `t`.
fn raw_all(padded: &[f64], t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let v3 = values_degree(padded, 3, t);
    let v2 = values_degree(padded, 2, t);
    let v1 = values_degree(padded, 1, t);
    let d1 = derivative_step(padded, 3, &v2);
    let dv2 = derivative_step(padded, 2, &v1);
    let d2 = derivative_step(padded, 3, &dv2);
    (v3, d1, d2)
}

/// Modified Gram-Schmidt in the `gram` inner product, one reorthogonalisation
/// pass. Returns the change-of-basis matrix with orthonormal rows.
fn orthonormalize(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    let mut w = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let cj = w.row(j).transpose();
                let ci = w.row(i).transpose();
                let proj = (gram * &ci).dot(&cj);
                let update = ci - cj * proj;
                w.row_mut(i).copy_from(&update.transpose());
            }
        }
        let ci = w.row(i).transpose();
        let norm2 = (gram * &ci).dot(&ci);
        if !(norm2 > 1e-14) {
            return Err(Error::DegenerateDesign(format!(
                "basis function {i} is numerically dependent on the others"
            )));
        }
        let inv = 1.0 / norm2.sqrt();
        w.row_mut(i).apply(|x| *x *= inv);
    }
    Ok(w)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
