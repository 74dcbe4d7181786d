//! BFGS with a strong-Wolfe line search (Nocedal & Wright, algorithms 3.5/3.6).
//!
//! Minimises `f`; callers maximise by negation. The objective returns `None`
//! where it is undefined or non-finite, which the line search treats as an
//! infinitely bad point.

use nalgebra::{DMatrix, DVector};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 40;
/// Relative improvement at the floating-point noise floor. Several
/// consecutive accepted steps below it, or a line search that cannot find any
/// sufficient-decrease point, mean the iterate is numerically stationary.
const STALL_TOL: f64 = 1e2 * f64::EPSILON;
const STALL_STEPS: usize = 3;

pub struct BfgsOptions {
    /// Converged when `‖g‖_∞ ≤ grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
}

pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

pub fn minimize<F>(mut eval: F, x0: DVector<f64>, opts: &BfgsOptions) -> Option<BfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut f, mut g) = eval(&x0)?;
    let mut x = x0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut just_reset = true;
    let mut flat_steps = 0usize;
    for iter in 0..opts.max_iter {
        if g.amax() <= opts.grad_tol * f.abs().max(1.0) {
            return Some(BfgsOutcome {
                x,
                f,
                grad: g,
                iterations: iter,
                converged: true,
                message: "gradient tolerance reached".into(),
            });
        }
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            just_reset = true;
            dir = -g.clone();
        }
        let ls = match line_search(&mut eval, &x, f, &g, &dir) {
            Some(v) => Some(v),
            None if !just_reset => {
                // steepest-descent restart, then one more attempt
                h = DMatrix::identity(n, n);
                just_reset = true;
                dir = -g.clone();
                line_search(&mut eval, &x, f, &g, &dir)
            }
            None => None,
        };
        let (step, fx, gx) = match ls {
            Some(v) => v,
            None => {
                // no sufficient-decrease point is detectable along the
                // steepest-descent direction at any step length: the iterate
                // is stationary to within floating-point resolution
                return Some(BfgsOutcome {
                    x,
                    f,
                    grad: g,
                    iterations: iter,
                    converged: true,
                    message: "stationary at floating-point resolution".into(),
                });
            }
        };
        let x_new = &x + &dir * step;
        let s = &x_new - &x;
        let yv = &gx - &g;
        update_inverse_hessian(&mut h, &s, &yv, just_reset);
        just_reset = false;
        let impr = (f - fx) / f.abs().max(fx.abs()).max(1.0);
        x = x_new;
        f = fx;
        g = gx;
        if impr <= STALL_TOL {
            flat_steps += 1;
            if flat_steps >= STALL_STEPS {
                return Some(BfgsOutcome {
                    x,
                    f,
                    grad: g,
                    iterations: iter + 1,
                    converged: true,
                    message: "stationary at floating-point resolution".into(),
                });
            }
        } else {
            flat_steps = 0;
        }
    }
    let converged = g.amax() <= opts.grad_tol * f.abs().max(1.0);
    Some(BfgsOutcome {
        x,
        f,
        grad: g,
        iterations: opts.max_iter,
        converged,
        message: if converged {
            "gradient tolerance reached".into()
        } else {
            "iteration limit reached".into()
        },
    })
}

fn update_inverse_hessian(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, fresh: bool) {
    let sy = s.dot(y);
    if !(sy > 1e-10 * s.norm() * y.norm()) {
        return; // curvature condition violated: skip update
    }
    if fresh {
        let yy = y.dot(y);
        if yy > 0.0 {
            let scale = sy / yy;
            *h *= 0.0;
            for i in 0..h.nrows() {
                (*h)[(i, i)] = scale;
            }
        }
    }
    let rho = 1.0 / sy;
    let hy = &*h * y;
    let yhy = y.dot(&hy);
    // H <- H - rho (H y s' + s y' H) + rho^2 (y' H y) s s' + rho s s'
    let n = h.nrows();
    for i in 0..n {
        for j in 0..n {
            (*h)[(i, j)] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Strong-Wolfe line search with a backtracking Armijo fallback; returns
/// (step, f, grad) at the accepted point.
fn line_search<F>(
    eval: &mut F,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let dphi0 = g0.dot(dir);
    if dphi0 >= 0.0 {
        return None;
    }
    let mut probe = |alpha: f64| -> Option<(f64, DVector<f64>, f64)> {
        let xt = x + dir * alpha;
        let (f, g) = eval(&xt)?;
        let d = g.dot(dir);
        Some((f, g, d))
    };
    let result = wolfe_search(&mut probe, f0, dphi0);
    if result.is_some() {
        return result;
    }
    // fallback: plain backtracking to any sufficient-decrease point
    let mut alpha = 1.0;
    for _ in 0..60 {
        if let Some((phi, g, _)) = probe(alpha) {
            if phi <= f0 + C1 * alpha * dphi0 {
                return Some((alpha, phi, g));
            }
        }
        alpha *= 0.5;
    }
    None
}

fn wolfe_search<P>(probe: &mut P, f0: f64, dphi0: f64) -> Option<(f64, f64, DVector<f64>)>
where
    P: FnMut(f64) -> Option<(f64, DVector<f64>, f64)>,
{
    let mut alpha_prev = 0.0;
    let mut phi_prev = f0;
    let mut dphi_prev = dphi0;
    let mut alpha = 1.0;
    let alpha_max = 1e6;
    for i in 0..MAX_BRACKET {
        match probe(alpha) {
            None => {
                // undefined: treat as too far, zoom toward the last good point
                return zoom(
                    probe,
                    f0,
                    dphi0,
                    (alpha_prev, phi_prev, dphi_prev),
                    (alpha, f64::INFINITY, f64::NAN),
                );
            }
            Some((phi, g, dphi)) => {
                if phi > f0 + C1 * alpha * dphi0 || (i > 0 && phi >= phi_prev) {
                    return zoom(
                        probe,
                        f0,
                        dphi0,
                        (alpha_prev, phi_prev, dphi_prev),
                        (alpha, phi, dphi),
                    );
                }
                if dphi.abs() <= -C2 * dphi0 {
                    return Some((alpha, phi, g));
                }
                if dphi >= 0.0 {
                    return zoom(
                        probe,
                        f0,
                        dphi0,
                        (alpha, phi, dphi),
                        (alpha_prev, phi_prev, dphi_prev),
                    );
                }
                alpha_prev = alpha;
                phi_prev = phi;
                dphi_prev = dphi;
                alpha = (2.0 * alpha).min(alpha_max);
                if alpha >= alpha_max {
                    return None;
                }
            }
        }
    }
    None
}

/// Zoom phase: `lo` always satisfies the sufficient-decrease condition.
fn zoom<P>(
    probe: &mut P,
    f0: f64,
    dphi0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<(f64, f64, DVector<f64>)>
where
    P: FnMut(f64) -> Option<(f64, DVector<f64>, f64)>,
{
    for _ in 0..MAX_ZOOM {
        let (alo, plo, dlo) = lo;
        let (ahi, phi_hi, _) = hi;
        if (ahi - alo).abs() < 1e-16 * alo.abs().max(1.0) {
            break;
        }
        let mut alpha = interpolate(alo, plo, dlo, ahi, phi_hi);
        let lo_a = alo.min(ahi);
        let hi_a = alo.max(ahi);
        let span = hi_a - lo_a;
        if !alpha.is_finite() || alpha <= lo_a + 0.1 * span || alpha >= hi_a - 0.1 * span {
            alpha = 0.5 * (alo + ahi);
        }
        match probe(alpha) {
            None => {
                hi = (alpha, f64::INFINITY, f64::NAN);
            }
            Some((phi, g, dphi)) => {
                if phi > f0 + C1 * alpha * dphi0 || phi >= plo {
                    hi = (alpha, phi, dphi);
                } else {
                    if dphi.abs() <= -C2 * dphi0 {
                        return Some((alpha, phi, g));
                    }
                    if dphi * (ahi - alo) >= 0.0 {
                        hi = lo;
                    }
                    lo = (alpha, phi, dphi);
                }
            }
        }
    }
    // fall back to the best sufficient-decrease point found
    let (alo, plo, _) = lo;
    if alo > 0.0 && plo < f0 {
        let (phi, g, _) = probe(alo)?;
        return Some((alo, phi, g));
    }
    None
}

/// Quadratic interpolation of the minimiser from (value, slope) at `lo` and
/// value at `hi`.
fn interpolate(alo: f64, plo: f64, dlo: f64, ahi: f64, phi_hi: f64) -> f64 {
    if !phi_hi.is_finite() {
        return 0.5 * (alo + ahi);
    }
    let da = ahi - alo;
    let denom = phi_hi - plo - dlo * da;
    if denom.abs() < 1e-300 {
        return 0.5 * (alo + ahi);
    }
    alo - 0.5 * dlo * da * da / denom
}
