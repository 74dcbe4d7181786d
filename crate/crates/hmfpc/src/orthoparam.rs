//! Unconstrained parameterisation of mutually orthogonal coefficient vectors.
//!
//! `β₁ = α₁`; for `k > 1`, `β_k = T_{k-1} α_k` where `T_{k-1}` holds the
//! trailing `n_B - k + 1` columns of `Q` from a Householder QR decomposition of
//! `B_{k-1} = (β₁ … β_{k-1})`. Any orthogonal set is reachable, and no
//! constraint is needed on the `α_k`. The construction is generic over the
//! scalar type so the fitting gradient can push dual numbers through it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns with norm below this are treated as absent when forming the QR
/// null space (a component estimated as exactly null).
const NULL_COLUMN_TOL: f64 = 1e-12;

/// Optimizer coordinates `θ = (β₀, α₁ … α_K, log σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub beta0: DVector<f64>,
    /// `α_k ∈ R^{n_B - k + 1}`, `k = 1..=K`.
    pub alphas: Vec<DVector<f64>>,
    pub log_sigma: f64,
}

impl ParamVector {
    pub fn new(beta0: DVector<f64>, alphas: Vec<DVector<f64>>, log_sigma: f64) -> Result<Self> {
        let n_basis = beta0.len();
        for (i, a) in alphas.iter().enumerate() {
            let want = alpha_dim(n_basis, i + 1);
            if a.len() != want {
                return Err(Error::InvalidArgument(format!(
                    "alpha_{} must have dimension {want}, got {}",
                    i + 1,
                    a.len()
                )));
            }
        }
        Ok(Self {
            beta0,
            alphas,
            log_sigma,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.beta0.len()
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }

    /// Total dimension `p = n_B + Σ_k (n_B - k + 1) + 1`.
    pub fn dim(&self) -> usize {
        self.n_basis() + self.alphas.iter().map(|a| a.len()).sum::<usize>() + 1
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(self.beta0.iter());
        for a in &self.alphas {
            v.extend(a.iter());
        }
        v.push(self.log_sigma);
        DVector::from_vec(v)
    }

    pub fn from_flat(flat: &DVector<f64>, n_basis: usize, k: usize) -> Result<Self> {
        let want = flat_dim(n_basis, k);
        if flat.len() != want {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector must have dimension {want}, got {}",
                flat.len()
            )));
        }
        let beta0 = DVector::from_iterator(n_basis, flat.iter().take(n_basis).copied());
        let mut off = n_basis;
        let mut alphas = Vec::with_capacity(k);
        for kk in 1..=k {
            let d = alpha_dim(n_basis, kk);
            alphas.push(DVector::from_iterator(
                d,
                flat.iter().skip(off).take(d).copied(),
            ));
            off += d;
        }
        Ok(Self {
            beta0,
            alphas,
            log_sigma: flat[off],
        })
    }
}

pub fn alpha_dim(n_basis: usize, k: usize) -> usize {
    n_basis - k + 1
}

pub fn flat_dim(n_basis: usize, k: usize) -> usize {
    n_basis + (1..=k).map(|kk| alpha_dim(n_basis, kk)).sum::<usize>() + 1
}

/// Orthogonal coefficient vectors with the transform and projected penalties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthoCoefs {
    /// `β_k ∈ R^{n_B}`, mutually orthogonal.
    pub betas: Vec<DVector<f64>>,
    /// `T_{k-1}`, `n_B × (n_B - k + 1)`, orthonormal columns, `T_{k-1}' B_{k-1} = 0`.
    pub t_matrices: Vec<DMatrix<f64>>,
    /// `S_k = T_{k-1}' S T_{k-1}` for `k = 1..=K`.
    pub s_matrices: Vec<DMatrix<f64>>,
}

impl OrthoCoefs {
    /// Eigenvalues `λ_k = ‖β_k‖²` in stored order.
    pub fn lambdas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| b.norm_squared()).collect()
    }

    /// Rebuild the transform chain for an explicit orthogonal set.
    pub fn from_betas(betas: Vec<DVector<f64>>, penalty: &DMatrix<f64>) -> Self {
        let n_basis = penalty.nrows();
        let mut t_matrices = Vec::with_capacity(betas.len());
        let mut s_matrices = Vec::with_capacity(betas.len());
        for k in 1..=betas.len() {
            let t = null_space_matrix(&betas[..k - 1], n_basis);
            s_matrices.push(t.transpose() * penalty * &t);
            t_matrices.push(t);
        }
        Self {
            betas,
            t_matrices,
            s_matrices,
        }
    }
}

/// Map unconstrained parameters to orthogonal coefficient vectors.
pub fn expand(params: &ParamVector, penalty: &DMatrix<f64>) -> OrthoCoefs {
    let n_basis = params.n_basis();
    let alphas: Vec<Vec<f64>> = params
        .alphas
        .iter()
        .map(|a| a.iter().copied().collect())
        .collect();
    let betas = expand_betas(n_basis, &alphas);
    let coefs = OrthoCoefs::from_betas(
        betas
            .into_iter()
            .map(DVector::from_vec)
            .collect(),
        penalty,
    );
    coefs
}

/// A fit normalised to the identifiability conventions: components in
/// descending `‖β_k‖` order, each with non-negative integral.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub coefs: OrthoCoefs,
    /// `permutation[j]` is the original index now in slot `j`.
    pub permutation: Vec<usize>,
    /// Sign applied to each (reordered) component; flip scores to match.
    pub signs: Vec<f64>,
}

/// Order components by descending norm and fix signs so `∫ f_k dt ≥ 0`.
/// Applied after optimisation only; the process law is unchanged when scores
/// are permuted and flipped in tandem.
pub fn normalize_fit(
    coefs: &OrthoCoefs,
    penalty: &DMatrix<f64>,
    moments: &DVector<f64>,
) -> Normalized {
    let k = coefs.betas.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        coefs.betas[b]
            .norm_squared()
            .partial_cmp(&coefs.betas[a].norm_squared())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut signs = Vec::with_capacity(k);
    let mut betas = Vec::with_capacity(k);
    for &orig in &order {
        let b = &coefs.betas[orig];
        let sign = if b.dot(moments) < 0.0 { -1.0 } else { 1.0 };
        signs.push(sign);
        betas.push(b * sign);
    }
    Normalized {
        coefs: OrthoCoefs::from_betas(betas, penalty),
        permutation: order,
        signs,
    }
}

// ---------------------------------------------------------------------------
// Generic scalar machinery (f64 and forward-mode dual numbers)
// ---------------------------------------------------------------------------

pub(crate) trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number carrying one tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    pub fn seeded(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}
impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}
impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}
impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}
impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual {
            v: s,
            d: self.d / (2.0 * s),
        }
    }
}

/// The α → β chain on plain vectors, generic over the scalar.
pub(crate) fn expand_betas<T: Scalar>(n_basis: usize, alphas: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut betas: Vec<Vec<T>> = Vec::with_capacity(alphas.len());
    for (idx, alpha) in alphas.iter().enumerate() {
        let k = idx + 1;
        if k == 1 {
            betas.push(alpha.clone());
            continue;
        }
        let t_cols = null_space_columns(&betas, n_basis, n_basis - k + 1);
        let mut beta = vec![T::from_f64(0.0); n_basis];
        for (col, &a) in t_cols.iter().zip(alpha.iter()) {
            for (bi, &ci) in beta.iter_mut().zip(col.iter()) {
                *bi = *bi + ci * a;
            }
        }
        betas.push(beta);
    }
    betas
}

/// Trailing `want` columns of `Q` from the Householder QR of the matrix whose
/// columns are `prev` (near-zero columns dropped). Deterministic: fixed
/// reflector sign choice, no pivoting.
fn null_space_columns<T: Scalar>(prev: &[Vec<T>], n: usize, want: usize) -> Vec<Vec<T>> {
    let active: Vec<&Vec<T>> = prev
        .iter()
        .filter(|c| {
            c.iter()
                .map(|x| x.value() * x.value())
                .sum::<f64>()
                .sqrt()
                >= NULL_COLUMN_TOL
        })
        .collect();
    let m = active.len();
    // working copy, column-major
    let mut a: Vec<Vec<T>> = active.iter().map(|c| (*c).clone()).collect();
    let zero = T::from_f64(0.0);
    let two = T::from_f64(2.0);
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(m);
    for j in 0..m {
        // Householder vector for rows j.. of column j
        let mut norm2 = zero;
        for i in j..n {
            norm2 = norm2 + a[j][i] * a[j][i];
        }
        if norm2.value() <= 0.0 {
            reflectors.push(None);
            continue;
        }
        let norm = norm2.sqrt();
        let sign = if a[j][j].value() < 0.0 { -1.0 } else { 1.0 };
        let mut v = vec![zero; n - j];
        for i in j..n {
            v[i - j] = a[j][i];
        }
        v[0] = v[0] + T::from_f64(sign) * norm;
        let mut vnorm2 = zero;
        for x in &v {
            vnorm2 = vnorm2 + *x * *x;
        }
        if vnorm2.value() < 1e-300 {
            reflectors.push(None);
            continue;
        }
        let vnorm = vnorm2.sqrt();
        for x in v.iter_mut() {
            *x = *x / vnorm;
        }
        // apply to remaining columns
        for col in a.iter_mut().skip(j) {
            let mut dot = zero;
            for i in j..n {
                dot = dot + v[i - j] * col[i];
            }
            let scale = two * dot;
            for i in j..n {
                col[i] = col[i] - scale * v[i - j];
            }
        }
        reflectors.push(Some(v));
    }
    // T columns: Q e_c = H_1 (H_2 (… H_m e_c)) for c = n - want .. n
    let start = n - want;
    let mut out = Vec::with_capacity(want);
    for c in start..n {
        let mut col = vec![zero; n];
        col[c] = T::from_f64(1.0);
        for j in (0..m).rev() {
            if let Some(v) = &reflectors[j] {
                let mut dot = zero;
                for i in j..n {
                    dot = dot + v[i - j] * col[i];
                }
                let scale = two * dot;
                for i in j..n {
                    col[i] = col[i] - scale * v[i - j];
                }
            }
        }
        out.push(col);
    }
    out
}

/// f64 convenience wrapper returning a matrix.
pub(crate) fn null_space_matrix(prev: &[DVector<f64>], n_basis: usize) -> DMatrix<f64> {
    let k = prev.len() + 1;
    let want = n_basis - k + 1;
    let prev_vecs: Vec<Vec<f64>> = prev.iter().map(|b| b.iter().copied().collect()).collect();
    let cols = null_space_columns(&prev_vecs, n_basis, want);
    DMatrix::from_fn(n_basis, want, |i, j| cols[j][i])
}

/// True when some earlier component is numerically null, which makes the
/// transform non-differentiable there.
pub(crate) fn has_null_component(betas: &[DVector<f64>]) -> Option<usize> {
    betas
        .iter()
        .take(betas.len().saturating_sub(1))
        .position(|b| b.norm() < NULL_COLUMN_TOL)
}
