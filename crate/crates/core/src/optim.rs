//! Small optimizers: Brent line minimization, damped Newton ascent for smooth concave
//! objectives, and weighted least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LineMin {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Brent's method on `[a, b]`; stops when the bracket is narrower than `~2 tol`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> LineMin {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut evals = 1;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return LineMin { x, fx, evaluations: evals, converged: true };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    LineMin { x, fx, evaluations: evals, converged: false }
}

/// Value, gradient and Hessian of an objective to be maximized.
pub struct Eval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Negative Hessian at the optimum (observed information).
    pub information: DMatrix<f64>,
}

/// Damped Newton ascent for concave objectives. Converged when the gradient
/// max-norm is at most `grad_tol`.
pub fn newton_maximize<F: FnMut(&DVector<f64>) -> Eval>(
    mut f: F,
    x0: DVector<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> Result<NewtonResult> {
    let mut x = x0;
    let mut cur = f(&x);
    let mut trace = Vec::new();
    for it in 0..max_iter {
        let gnorm = cur.grad.amax();
        trace.push(format!("{it}:{:.6e}/{:.3e}", cur.value, gnorm));
        if !cur.value.is_finite() {
            return Err(Error::Optimizer(format!("non-finite objective at iteration {it}")));
        }
        if gnorm <= grad_tol {
            return Ok(NewtonResult { x, value: cur.value, iterations: it, information: -cur.hess });
        }
        let neg_h = -cur.hess.clone();
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => {
                // fall back to a regularized system when curvature is not definite
                let scale = neg_h.diagonal().amax().max(1.0);
                let reg = &neg_h + DMatrix::identity(x.len(), x.len()) * (1e-6 * scale);
                match reg.cholesky() {
                    Some(ch) => ch.solve(&cur.grad),
                    None => cur.grad.clone() / scale,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x + &step * t;
            let next = f(&cand);
            if next.value.is_finite() && next.value >= cur.value - 1e-12 * cur.value.abs().max(1.0) {
                x = cand;
                cur = next;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let gnorm = cur.grad.amax();
            if gnorm <= grad_tol * 1e3 {
                // numerically at the optimum; curvature flat to rounding
                return Ok(NewtonResult { x, value: cur.value, iterations: it, information: -cur.hess });
            }
            return Err(Error::NonConvergence {
                iterations: it,
                grad_norm: gnorm,
                trace: trace.join(" "),
            });
        }
    }
    let gnorm = cur.grad.amax();
    if gnorm <= grad_tol {
        return Ok(NewtonResult { x, value: cur.value, iterations: max_iter, information: -cur.hess });
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        grad_norm: gnorm,
        trace: trace.join(" "),
    })
}

/// Accumulates the weighted normal equations of a linear regression.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub weight_sum: f64,
    pub rows: usize,
}

impl NormalEquations {
    pub fn new(p: usize) -> Self {
        NormalEquations {
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
            weight_sum: 0.0,
            rows: 0,
        }
    }

    pub fn add(&mut self, x: &[f64], y: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        let p = x.len();
        for i in 0..p {
            let wxi = w * x[i];
            self.xty[i] += wxi * y;
            for j in 0..=i {
                self.xtx[(i, j)] += wxi * x[j];
            }
        }
        self.yty += w * y * y;
        self.weight_sum += w;
        self.rows += 1;
    }

    /// Coefficients and weighted residual sum of squares; `None` when the design is
    /// numerically rank deficient.
    pub fn solve(&self) -> Option<(DVector<f64>, f64)> {
        let p = self.xty.len();
        let mut a = self.xtx.clone();
        for i in 0..p {
            for j in 0..i {
                a[(j, i)] = a[(i, j)];
            }
        }
        let d: Vec<f64> = (0..p).map(|i| a[(i, i)]).collect();
        if d.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
        let scaled = DMatrix::from_fn(p, p, |i, j| a[(i, j)] * s[i] * s[j]);
        let ch = scaled.clone().cholesky()?;
        let l = ch.l();
        let min_pivot = (0..p).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-7) {
            return None;
        }
        let rhs = DVector::from_fn(p, |i, _| self.xty[i] * s[i]);
        let z = ch.solve(&rhs);
        let beta = DVector::from_fn(p, |i, _| z[i] * s[i]);
        let rss = (self.yty - 2.0 * beta.dot(&self.xty) + beta.dot(&(&a * &beta))).max(0.0);
        Some((beta, rss))
    }
}
