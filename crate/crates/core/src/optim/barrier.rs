//! Log-barrier Newton method for `min F(x)` subject to `A x <= b` and
//! optional equalities `E x = e`, with `F` convex and twice differentiable
//! on an open domain.
//!
//! Problems here are small and dense (tens of variables, a few hundred
//! constraints), so every Newton step is a direct factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Objective evaluation at a point.
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

pub trait ConvexObjective {
    fn dim(&self) -> usize;

    /// `None` when `x` lies outside the domain of the objective. The Hessian
    /// is only required when `with_hessian` is set.
    fn evaluate(&self, x: &DVector<f64>, with_hessian: bool) -> Option<Evaluation>;
}

/// `A x <= b`, one row per constraint.
#[derive(Clone, Debug)]
pub struct LinearConstraints {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearConstraints {
    pub fn empty(dim: usize) -> Self {
        LinearConstraints {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
        }
    }

    pub fn from_rows(dim: usize, rows: Vec<(Vec<(usize, f64)>, f64)>) -> Self {
        let mut a = DMatrix::zeros(rows.len(), dim);
        let mut b = DVector::zeros(rows.len());
        for (k, (terms, rhs)) in rows.into_iter().enumerate() {
            for (j, c) in terms {
                a[(k, j)] += c;
            }
            b[k] = rhs;
        }
        LinearConstraints { a, b }
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * x
    }

    /// Largest `max(0, A x - b)`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.slack(x).iter().fold(0.0_f64, |acc, s| acc.max(-s))
    }
}

#[derive(Clone, Debug)]
pub struct BarrierOptions {
    /// Stop once the duality-gap bound `m / t` falls below this.
    pub gap_tol: f64,
    /// Barrier weight growth per outer iteration.
    pub mu: f64,
    pub t0: f64,
    /// Newton decrement threshold (half the squared decrement) per centering.
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            gap_tol: 1e-11,
            mu: 10.0,
            t0: 1.0,
            newton_tol: 1e-13,
            max_newton: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarrierResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub newton_iterations: usize,
    /// `m / t` at termination; an upper bound on `F(x) - F*` for exact centering.
    pub gap_bound: f64,
    /// Whether the final centering step met its decrement tolerance.
    pub centered: bool,
}

/// Minimizes `obj` from the strictly feasible starting point `x0`.
///
/// Equalities are eliminated up front: the search runs over `x0 + Z y` with
/// `Z` an orthonormal basis of `ker E`, which keeps `E x = e` exact to
/// rounding regardless of how ill-conditioned the barrier Hessian becomes.
pub fn minimize(
    obj: &dyn ConvexObjective,
    ineq: &LinearConstraints,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    x0: DVector<f64>,
    opts: &BarrierOptions,
) -> Result<BarrierResult> {
    let n = obj.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x0.len(),
        });
    }
    match eq {
        None => minimize_free(obj, ineq, x0, opts),
        Some((e, rhs)) => {
            let residual = (e * &x0 - rhs).amax();
            if residual > 1e-9 * (1.0 + rhs.amax()) {
                return Err(Error::Infeasible(format!(
                    "barrier start point violates the equalities by {residual:e}"
                )));
            }
            let z = null_space(e);
            let reduced = Reduced {
                inner: obj,
                origin: x0.clone(),
                basis: z.clone(),
            };
            let reduced_ineq = LinearConstraints {
                a: &ineq.a * &z,
                b: ineq.slack(&x0),
            };
            let r = minimize_free(&reduced, &reduced_ineq, DVector::zeros(z.ncols()), opts)?;
            Ok(BarrierResult {
                x: x0 + z * r.x,
                ..r
            })
        }
    }
}

fn minimize_free(
    obj: &dyn ConvexObjective,
    ineq: &LinearConstraints,
    x0: DVector<f64>,
    opts: &BarrierOptions,
) -> Result<BarrierResult> {
    let m = ineq.len();
    if m > 0 && ineq.slack(&x0).iter().any(|&s| s <= 0.0) {
        return Err(Error::Infeasible(
            "barrier start point is not strictly feasible".into(),
        ));
    }
    if obj.evaluate(&x0, false).is_none() {
        return Err(Error::Infeasible(
            "barrier start point is outside the objective domain".into(),
        ));
    }

    let mut x = x0;
    let mut t = if m == 0 { 1.0 } else { opts.t0 };
    let mut iterations = 0;
    let mut centered;
    // Last centered iterate, kept in case a later stage breaks down.
    let mut last_good: Option<(DVector<f64>, f64)> = None;
    loop {
        match center(obj, ineq, &mut x, t, opts, &mut iterations) {
            Ok(c) => centered = c,
            Err(e) => match last_good.take() {
                // Numerical breakdown once the gap nears rounding level.
                Some((good, good_t)) => {
                    x = good;
                    t = good_t;
                    centered = true;
                    break;
                }
                None => return Err(e),
            },
        }
        // The gap target is relative: an absolute 1e-12 on a value of
        // magnitude 1e4 is below double-precision resolution.
        let scale = obj.evaluate(&x, false).map_or(1.0, |e| 1.0 + e.value.abs());
        if m == 0 || (m as f64) / t < opts.gap_tol * scale {
            break;
        }
        if centered {
            last_good = Some((x.clone(), t));
        }
        t *= opts.mu;
    }
    let value = obj
        .evaluate(&x, false)
        .map(|e| e.value)
        .ok_or_else(|| Error::NonConvergence("final iterate left the domain".into()))?;
    Ok(BarrierResult {
        x,
        value,
        newton_iterations: iterations,
        gap_bound: if m == 0 { 0.0 } else { m as f64 / t },
        centered,
    })
}

/// Orthonormal basis of `ker E` (columns).
fn null_space(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.ncols();
    let gram = e.transpose() * e;
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&k| eig.eigenvalues[k].abs() <= 1e-10 * top.max(1e-300))
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

struct Reduced<'a> {
    inner: &'a dyn ConvexObjective,
    origin: DVector<f64>,
    basis: DMatrix<f64>,
}

impl ConvexObjective for Reduced<'_> {
    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn evaluate(&self, y: &DVector<f64>, with_hessian: bool) -> Option<Evaluation> {
        let x = &self.origin + &self.basis * y;
        let e = self.inner.evaluate(&x, with_hessian)?;
        let bt = self.basis.transpose();
        Some(Evaluation {
            value: e.value,
            gradient: &bt * e.gradient,
            hessian: e.hessian.map(|h| &bt * h * &self.basis),
        })
    }
}

/// Newton decrement accepted when the iterate has stopped moving.
const STALL_DECREMENT: f64 = 1e-8;

/// Newton iterations on `t F(x) - Σ log(b - A x)`.
fn center(
    obj: &dyn ConvexObjective,
    ineq: &LinearConstraints,
    x: &mut DVector<f64>,
    t: f64,
    opts: &BarrierOptions,
    iterations: &mut usize,
) -> Result<bool> {
    for _ in 0..opts.max_newton {
        *iterations += 1;
        let e = obj
            .evaluate(x, true)
            .ok_or_else(|| Error::NonConvergence("iterate left the objective domain".into()))?;
        let s = ineq.slack(x);
        let inv_s = s.map(|v| 1.0 / v);
        let grad = e.gradient * t + ineq.a.transpose() * &inv_s;
        let mut hess = e.hessian.expect("hessian requested") * t;
        if !ineq.is_empty() {
            let scaled = DMatrix::from_fn(ineq.len(), ineq.a.ncols(), |k, j| ineq.a[(k, j)] * inv_s[k]);
            hess += scaled.transpose() * scaled;
        }

        let dx = newton_direction(&hess, &grad)?;
        let decrement = -grad.dot(&dx);
        if !(decrement > 2.0 * opts.newton_tol) {
            return Ok(true);
        }
        match line_search(obj, ineq, x, &dx, t, &grad) {
            Some(step) => {
                let next = &*x + dx * step;
                // At the rounding floor the step barely moves `x`; a small
                // decrement there is as centered as this precision allows.
                let moved = (&next - &*x).amax();
                if moved <= 64.0 * f64::EPSILON * (1.0 + x.amax()) {
                    return Ok(decrement < STALL_DECREMENT);
                }
                *x = next;
            }
            None => return Ok(false),
        }
    }
    Ok(false)
}

/// Solves `H dx = -grad`, adding a growing diagonal shift when `H` is singular.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = hess.nrows();
    let scale = hess.diagonal().iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let mut reg = 0.0;
    for _ in 0..30 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(dx) = h.cholesky().map(|c| c.solve(&(-grad))) {
            if dx.iter().all(|v| v.is_finite()) {
                return Ok(dx);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    Err(Error::NonConvergence("singular Newton system".into()))
}

/// Step length along `dx`: full Newton step when it decreases the barrier
/// function, else a bisection on the sign of the directional derivative.
/// Working with derivatives avoids cancellation in `t F` once `t` is large.
fn line_search(
    obj: &dyn ConvexObjective,
    ineq: &LinearConstraints,
    x: &DVector<f64>,
    dx: &DVector<f64>,
    t: f64,
    grad: &DVector<f64>,
) -> Option<f64> {
    let d0 = grad.dot(dx);
    if !(d0 < 0.0) {
        return None;
    }
    let adx = &ineq.a * dx;
    let s0 = ineq.slack(x);
    let mut step_max = f64::INFINITY;
    for k in 0..ineq.len() {
        if adx[k] > 0.0 {
            step_max = step_max.min(s0[k] / adx[k]);
        }
    }
    let first = if step_max.is_finite() { (0.99 * step_max).min(1.0) } else { 1.0 };

    let phi = |alpha: f64| -> Option<(f64, f64)> {
        let xa = x + dx * alpha;
        let e = obj.evaluate(&xa, false)?;
        let mut val = t * e.value;
        let mut deriv = t * e.gradient.dot(dx);
        for k in 0..ineq.len() {
            let s = s0[k] - alpha * adx[k];
            if s <= 0.0 {
                return None;
            }
            val -= s.ln();
            deriv += adx[k] / s;
        }
        if val.is_finite() && deriv.is_finite() {
            Some((val, deriv))
        } else {
            None
        }
    };
    let phi0 = {
        let e = obj.evaluate(x, false)?;
        t * e.value - s0.iter().map(|s| s.ln()).sum::<f64>()
    };

    if let Some((v, d)) = phi(first) {
        if d <= 0.0 || v <= phi0 + 1e-4 * first * d0 {
            return Some(first);
        }
    }
    let (mut lo, mut hi) = (0.0, first);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        match phi(mid) {
            Some((_, d)) if d <= 0.0 => {
                lo = mid;
                if d.abs() <= 0.1 * d0.abs() {
                    break;
                }
            }
            _ => hi = mid,
        }
    }
    if lo > 0.0 {
        Some(lo)
    } else {
        None
    }
}
