//! Exact solvers on finite supports.
//!
//! The `(f, Γ)`-divergence is computed from its variational form with the
//! shift `ν` eliminated: maximize `q·g − Λ_f^P[g]` over `g = M x`, `A x ≤ b`,
//! by a log-barrier Newton method. The infimal-convolution form is solved
//! independently as a convex program over transport plans, and the Γ-IPM is
//! a linear program.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::extended::ExtReal;
use crate::functionals::{
    lambda_f_weights, optimal_shift, shift_derivative, shifted_objective, FunctionClassSpec,
};
use crate::generators::{ConvexGenerator, GeneratorKind};
use crate::measures::{joint_support, DiscreteMeasure, JointSupport, StochasticKernel};
use crate::optim::barrier::{minimize, BarrierOptions, ConvexObjective, Evaluation, LinearConstraints};
use crate::optim::scalar::{bisect_nondecreasing, bracket_nondecreasing};

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub barrier: BarrierOptions,
    /// Values above this are reported as `+∞`.
    pub ceiling: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            barrier: BarrierOptions::default(),
            ceiling: 1e9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub method: String,
    pub iterations: usize,
    /// Largest violation of the Γ constraints by the returned witness.
    pub constraint_violation: f64,
    /// Bound on the optimality gap of the reported value.
    pub gap_bound: f64,
}

/// A divergence value with its witnesses on the joint support.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceSolution {
    pub value: ExtReal,
    /// Support of `Q` followed by the points only `P` charges.
    pub support: Vec<Vec<f64>>,
    pub g_star: Option<Vec<f64>>,
    pub nu_star: Option<f64>,
    /// Intermediate measure on `supp(P)`.
    pub eta_star: Option<DiscreteMeasure>,
    /// Rows follow `supp(Q)`, columns follow `supp(P)`.
    pub transport_plan: Option<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
}

/// `Σ p_j f(q_j / p_j)` on aligned weights; `+∞` when `Q ⋪ P`.
pub fn f_divergence_weights(f: &ConvexGenerator, q: &[f64], p: &[f64]) -> ExtReal {
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if pi > 0.0 {
            let v = f.f(qi / pi);
            if !v.is_finite() {
                return ExtReal::PosInf;
            }
            acc += pi * v;
        } else if qi > 0.0 {
            return ExtReal::PosInf;
        }
    }
    ExtReal::Finite(acc)
}

pub fn f_divergence(q: &DiscreteMeasure, p: &DiscreteMeasure, f: &ConvexGenerator) -> Result<ExtReal> {
    let js = joint_support(q, p)?;
    Ok(f_divergence_weights(f, &js.q, &js.p))
}

/// Linear parametrization `g = E x` of Γ on a point set, with constraints on `x`.
pub(crate) struct ClassEmbedding {
    pub embed: DMatrix<f64>,
    pub constraints: LinearConstraints,
    /// Γ is not bounded in the parameters (feature classes without a box).
    pub unbounded: bool,
}

pub(crate) fn class_embedding(gamma: &FunctionClassSpec, points: &[Vec<f64>]) -> Result<ClassEmbedding> {
    gamma.validate()?;
    let n = points.len();
    match gamma {
        FunctionClassSpec::Lipschitz { bound, .. } => {
            let gauge = bound.is_none();
            let k = if gauge { n - 1 } else { n };
            let col = |i: usize| if gauge { i.checked_sub(1) } else { Some(i) };
            let embed = DMatrix::from_fn(n, k, |i, j| if col(i) == Some(j) { 1.0 } else { 0.0 });
            let mut rows = Vec::new();
            for c in gamma.pair_constraints(points)? {
                let mut terms = Vec::with_capacity(2);
                if let Some(a) = col(c.i) {
                    terms.push((a, 1.0));
                }
                if let Some(b) = col(c.j) {
                    terms.push((b, -1.0));
                }
                rows.push((terms, c.cap));
            }
            if let Some(b) = bound {
                for i in 0..n {
                    rows.push((vec![(i, 1.0)], *b));
                    rows.push((vec![(i, -1.0)], *b));
                }
            }
            Ok(ClassEmbedding {
                embed,
                constraints: LinearConstraints::from_rows(k, rows),
                unbounded: false,
            })
        }
        FunctionClassSpec::AllBounded { bound } => {
            let mut rows = Vec::with_capacity(2 * n);
            for i in 0..n {
                rows.push((vec![(i, 1.0)], *bound));
                rows.push((vec![(i, -1.0)], *bound));
            }
            Ok(ClassEmbedding {
                embed: DMatrix::identity(n, n),
                constraints: LinearConstraints::from_rows(n, rows),
                unbounded: false,
            })
        }
        FunctionClassSpec::FeatureLinear { features, param_bound } => {
            let m = features.len();
            let phi: Vec<Vec<f64>> = points.iter().map(|x| features.eval(x)).collect();
            if phi.iter().any(|r| r.len() != m) {
                return invalid("feature map output has the wrong length");
            }
            let embed = DMatrix::from_fn(n, m, |i, k| phi[i][k]);
            let constraints = match param_bound {
                Some(b) => box_constraints(m, *b),
                None => LinearConstraints::empty(m),
            };
            Ok(ClassEmbedding {
                embed,
                constraints,
                unbounded: param_bound.is_none(),
            })
        }
    }
}

fn box_constraints(m: usize, b: f64) -> LinearConstraints {
    let mut rows = Vec::with_capacity(2 * m);
    for k in 0..m {
        rows.push((vec![(k, 1.0)], b));
        rows.push((vec![(k, -1.0)], b));
    }
    LinearConstraints::from_rows(m, rows)
}

/// `F(x) = −q·Mx + Λ_f^P[Mx]`, convex in `x`.
struct DualObjective<'a> {
    f: &'a ConvexGenerator,
    q: &'a [f64],
    p: &'a [f64],
    m: &'a DMatrix<f64>,
}

impl ConvexObjective for DualObjective<'_> {
    fn dim(&self) -> usize {
        self.m.ncols()
    }

    fn evaluate(&self, x: &DVector<f64>, with_hessian: bool) -> Option<Evaluation> {
        let g = self.m * x;
        let gs = g.as_slice();
        let nu = optimal_shift(self.f, self.p, gs)?;
        let lam = shifted_objective(self.f, self.p, gs, nu).finite()?;
        let n = g.len();
        let mut resid = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        let mut gain = 0.0;
        for j in 0..n {
            gain += self.q[j] * gs[j];
            let mut eta = 0.0;
            if self.p[j] > 0.0 {
                eta = self.p[j] * self.f.f_star_prime(gs[j] - nu)?;
                if with_hessian {
                    w[j] = self.p[j] * self.f.f_star_second(gs[j] - nu)?;
                }
            }
            resid[j] = eta - self.q[j];
        }
        let gradient = self.m.transpose() * resid;
        let hessian = with_hessian.then(|| {
            let sw = w.sum();
            let mw = self.m.transpose() * &w;
            let mut h = DMatrix::zeros(self.m.ncols(), self.m.ncols());
            for j in 0..n {
                if w[j] != 0.0 {
                    let row = self.m.row(j);
                    h += row.transpose() * row * w[j];
                }
            }
            if sw > 0.0 {
                h -= &mw * mw.transpose() / sw;
            }
            h
        });
        Some(Evaluation {
            value: lam - gain,
            gradient,
            hessian,
        })
    }
}

/// Optimizer of the dual problem for a fixed parametrization.
pub(crate) struct DualOutcome {
    pub value: ExtReal,
    pub x: DVector<f64>,
    pub g: Vec<f64>,
    pub nu: Option<f64>,
    pub iterations: usize,
    pub gap_bound: f64,
}

/// Maximizes `q·g − Λ_f^P[g]` over `g = M x`, `A x ≤ b`. Zero is assumed feasible.
pub(crate) fn solve_dual(
    f: &ConvexGenerator,
    q: &[f64],
    p: &[f64],
    m: &DMatrix<f64>,
    cons: &LinearConstraints,
    unbounded: bool,
    opts: &SolverOptions,
) -> Result<DualOutcome> {
    let n = m.nrows();
    let k = m.ncols();
    let zero_outcome = |iterations, gap_bound| DualOutcome {
        value: ExtReal::ZERO,
        x: DVector::zeros(k),
        g: vec![0.0; n],
        nu: Some(-f.nu0()),
        iterations,
        gap_bound,
    };
    if k == 0 {
        return Ok(zero_outcome(0, 0.0));
    }
    let obj = DualObjective { f, q, p, m };

    if unbounded {
        // No constraint keeps the parameters finite: solve inside growing boxes
        // and call the value infinite if it passes the ceiling or keeps pressing
        // against the box.
        let mut last = None;
        for radius in [1e2, 1e4, 1e6, 1e8] {
            let cons = box_constraints(k, radius);
            let r = minimize(&obj, &cons, None, DVector::zeros(k), &opts.barrier)?;
            let value = -r.value;
            if value > opts.ceiling {
                return Err(Error::Divergence {
                    value,
                    ceiling: opts.ceiling,
                });
            }
            let pressing = r.x.amax() > 0.99 * radius;
            last = Some((r, pressing));
            if !pressing {
                break;
            }
        }
        let (r, pressing) = last.expect("at least one radius");
        if pressing {
            return Ok(DualOutcome {
                value: ExtReal::PosInf,
                x: r.x,
                g: Vec::new(),
                nu: None,
                iterations: r.newton_iterations,
                gap_bound: f64::INFINITY,
            });
        }
        return finish_dual(f, q, p, m, r.x, r.newton_iterations, r.gap_bound);
    }

    let r = minimize(&obj, cons, None, DVector::zeros(k), &opts.barrier)?;
    finish_dual(f, q, p, m, r.x, r.newton_iterations, r.gap_bound)
}

fn finish_dual(
    f: &ConvexGenerator,
    q: &[f64],
    p: &[f64],
    m: &DMatrix<f64>,
    x: DVector<f64>,
    iterations: usize,
    gap_bound: f64,
) -> Result<DualOutcome> {
    let g: Vec<f64> = (m * &x).iter().copied().collect();
    let lam = lambda_f_weights(f, p, &g)?;
    let gain: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
    let value = ExtReal::Finite(gain) - lam.value;
    match value {
        // g = 0 is always admissible and scores exactly 0.
        ExtReal::Finite(v) if v >= 0.0 => Ok(DualOutcome {
            value,
            x,
            g,
            nu: lam.nu_star,
            iterations,
            gap_bound,
        }),
        _ => Ok(DualOutcome {
            value: ExtReal::ZERO,
            x: DVector::zeros(m.ncols()),
            g: vec![0.0; m.nrows()],
            nu: Some(-f.nu0()),
            iterations,
            gap_bound,
        }),
    }
}

fn gibbs_eta(f: &ConvexGenerator, js: &JointSupport, g: &[f64], nu: f64) -> Option<DiscreteMeasure> {
    let mut pts = Vec::new();
    let mut w = Vec::new();
    for (j, x) in js.points.iter().enumerate() {
        if js.p[j] > 0.0 {
            pts.push(x.clone());
            w.push(js.p[j] * f.f_star_prime(g[j] - nu)?);
        }
    }
    DiscreteMeasure::normalized(pts, w).ok()
}

/// `D_f^Γ(Q‖P)` by the dual barrier method.
pub fn f_gamma_divergence(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
) -> Result<DivergenceSolution> {
    f_gamma_divergence_with(q, p, f, gamma, &SolverOptions::default())
}

pub fn f_gamma_divergence_with(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
    opts: &SolverOptions,
) -> Result<DivergenceSolution> {
    let js = joint_support(q, p)?;
    let emb = class_embedding(gamma, &js.points)?;
    let out = solve_dual(f, &js.q, &js.p, &emb.embed, &emb.constraints, emb.unbounded, opts)?;
    let constraint_violation = if out.g.is_empty() {
        0.0
    } else if let FunctionClassSpec::FeatureLinear { .. } = gamma {
        emb.constraints.max_violation(&out.x)
    } else {
        gamma.violation(&js.points, &out.g)?
    };
    let eta_star = match (out.value, out.nu) {
        (ExtReal::Finite(_), Some(nu)) => gibbs_eta(f, &js, &out.g, nu),
        _ => None,
    };
    Ok(DivergenceSolution {
        value: out.value,
        support: js.points,
        g_star: (!out.g.is_empty()).then_some(out.g),
        nu_star: out.nu,
        eta_star,
        transport_plan: None,
        diagnostics: Diagnostics {
            method: "dual-barrier".into(),
            iterations: out.iterations,
            constraint_violation,
            gap_bound: out.gap_bound,
        },
    })
}

/// `W^Γ(Q, P) = sup_{g ∈ Γ} E_Q[g] − E_P[g]` as a linear program.
pub fn gamma_ipm(q: &DiscreteMeasure, p: &DiscreteMeasure, gamma: &FunctionClassSpec) -> Result<DivergenceSolution> {
    let js = joint_support(q, p)?;
    let (value, g) = gamma_ipm_weights(&js.points, &js.q, &js.p, gamma)?;
    let constraint_violation = match (&g, gamma) {
        (Some(g), FunctionClassSpec::Lipschitz { .. } | FunctionClassSpec::AllBounded { .. }) => {
            gamma.violation(&js.points, g)?
        }
        _ => 0.0,
    };
    Ok(DivergenceSolution {
        value,
        support: js.points,
        g_star: g,
        nu_star: None,
        eta_star: None,
        transport_plan: None,
        diagnostics: Diagnostics {
            method: "simplex".into(),
            iterations: 0,
            constraint_violation,
            gap_bound: 0.0,
        },
    })
}

/// Γ-IPM between weight vectors on a common point list.
pub fn gamma_ipm_weights(
    points: &[Vec<f64>],
    q: &[f64],
    p: &[f64],
    gamma: &FunctionClassSpec,
) -> Result<(ExtReal, Option<Vec<f64>>)> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    gamma.validate()?;
    let n = points.len();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let free = (f64::NEG_INFINITY, f64::INFINITY);
    match gamma {
        FunctionClassSpec::Lipschitz { .. } | FunctionClassSpec::AllBounded { .. } => {
            let b = gamma.bound();
            let range = b.map_or(free, |b| (-b, b));
            let vars: Vec<_> = (0..n)
                .map(|i| {
                    // Gauge: without a bound the class is shift invariant.
                    if i == 0 && b.is_none() {
                        lp.add_var(q[i] - p[i], (0.0, 0.0))
                    } else {
                        lp.add_var(q[i] - p[i], range)
                    }
                })
                .collect();
            for c in gamma.pair_constraints(points)? {
                lp.add_constraint([(vars[c.i], 1.0), (vars[c.j], -1.0)], ComparisonOp::Le, c.cap);
            }
            let sol = lp
                .solve()
                .map_err(|e| Error::NonConvergence(format!("Γ-IPM linear program: {e}")))?;
            let g: Vec<f64> = vars.iter().map(|v| sol[*v]).collect();
            let value: f64 = (0..n).map(|i| (q[i] - p[i]) * g[i]).sum();
            Ok((ExtReal::Finite(value.max(0.0)), Some(g)))
        }
        FunctionClassSpec::FeatureLinear { features, param_bound } => {
            let m = features.len();
            let phi: Vec<Vec<f64>> = points.iter().map(|x| features.eval(x)).collect();
            let range = param_bound.map_or(free, |b| (-b, b));
            let vars: Vec<_> = (0..m)
                .map(|k| {
                    let c: f64 = (0..n).map(|i| (q[i] - p[i]) * phi[i][k]).sum();
                    lp.add_var(c, range)
                })
                .collect();
            match lp.solve() {
                Ok(sol) => {
                    let theta: Vec<f64> = vars.iter().map(|v| sol[*v]).collect();
                    let g: Vec<f64> = phi
                        .iter()
                        .map(|r| r.iter().zip(&theta).map(|(a, b)| a * b).sum())
                        .collect();
                    let value: f64 = (0..n).map(|i| (q[i] - p[i]) * g[i]).sum();
                    Ok((ExtReal::Finite(value.max(0.0)), Some(g)))
                }
                Err(minilp::Error::Unbounded) => Ok((ExtReal::PosInf, None)),
                Err(e) => Err(Error::NonConvergence(format!("Γ-IPM linear program: {e}"))),
            }
        }
    }
}

/// `Σ_j p_j f(η_j / p_j) + Σ_ij π_ij C_ij` with `η = πᵀ 1`.
struct PrimalObjective<'a> {
    f: &'a ConvexGenerator,
    p: &'a [f64],
    cost: &'a [f64],
    rows: usize,
}

impl PrimalObjective<'_> {
    fn cols(&self) -> usize {
        self.p.len()
    }

    fn column_sums(&self, x: &DVector<f64>) -> Vec<f64> {
        let c = self.cols();
        let mut eta = vec![0.0; c];
        for i in 0..self.rows {
            for j in 0..c {
                eta[j] += x[i * c + j];
            }
        }
        eta
    }
}

impl ConvexObjective for PrimalObjective<'_> {
    fn dim(&self) -> usize {
        self.rows * self.cols()
    }

    fn evaluate(&self, x: &DVector<f64>, with_hessian: bool) -> Option<Evaluation> {
        let c = self.cols();
        let eta = self.column_sums(x);
        let mut value = 0.0;
        let mut slope = vec![0.0; c];
        let mut curv = vec![0.0; c];
        for j in 0..c {
            let r = eta[j] / self.p[j];
            if !(r > 0.0) {
                return None;
            }
            let v = self.f.f(r);
            if !v.is_finite() {
                return None;
            }
            value += self.p[j] * v;
            slope[j] = self.f.f_prime(r);
            curv[j] = self.f.f_second(r) / self.p[j];
        }
        value += self.cost.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        let gradient = DVector::from_fn(self.dim(), |k, _| slope[k % c] + self.cost[k]);
        let hessian = with_hessian.then(|| {
            DMatrix::from_fn(self.dim(), self.dim(), |a, b| {
                if a % c == b % c {
                    curv[a % c]
                } else {
                    0.0
                }
            })
        });
        Some(Evaluation {
            value,
            gradient,
            hessian,
        })
    }
}

/// `inf_η {D_f(η‖P) + W^Γ(Q, η)}` over transport plans from `Q` onto `supp(P)`.
pub fn infimal_convolution(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
) -> Result<DivergenceSolution> {
    infimal_convolution_with(q, p, f, gamma, &SolverOptions::default())
}

pub fn infimal_convolution_with(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
    opts: &SolverOptions,
) -> Result<DivergenceSolution> {
    let (lip, metric) = match gamma {
        FunctionClassSpec::Lipschitz {
            lip,
            metric,
            bound: None,
        } => (*lip, metric),
        _ => return invalid("the infimal convolution needs a Lipschitz class without a bound"),
    };
    gamma.validate()?;
    if !f.admissible() {
        return invalid(format!("generator {} is not admissible", f.name()));
    }
    let js = joint_support(q, p)?;
    let rows = q.len();
    let cols = p.len();
    let mut cost = Vec::with_capacity(rows * cols);
    for xi in q.points() {
        for yj in p.points() {
            cost.push(lip * metric.distance(xi, yj)?);
        }
    }
    let obj = PrimalObjective {
        f,
        p: p.weights(),
        cost: &cost,
        rows,
    };
    let dim = rows * cols;
    let ineq = LinearConstraints::from_rows(dim, (0..dim).map(|k| (vec![(k, -1.0)], 0.0)).collect());
    let eq = DMatrix::from_fn(rows, dim, |i, k| if k / cols == i { 1.0 } else { 0.0 });
    let rhs = DVector::from_column_slice(q.weights());
    let x0 = DVector::from_fn(dim, |k, _| q.weights()[k / cols] * p.weights()[k % cols]);
    let r = minimize(&obj, &ineq, Some((&eq, &rhs)), x0, &opts.barrier)?;

    let plan: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..cols).map(|j| r.x[i * cols + j].max(0.0)).collect())
        .collect();
    let eta_w = obj.column_sums(&r.x);
    let eta = DiscreteMeasure::normalized(p.points().to_vec(), eta_w)?;
    let row_err = plan
        .iter()
        .zip(q.weights())
        .map(|(row, qi)| (row.iter().sum::<f64>() - qi).abs())
        .fold(0.0, f64::max);
    Ok(DivergenceSolution {
        value: ExtReal::Finite(r.value.max(0.0)),
        support: js.points,
        g_star: None,
        nu_star: None,
        eta_star: Some(eta),
        transport_plan: Some(plan),
        diagnostics: Diagnostics {
            method: "primal-barrier".into(),
            iterations: r.newton_iterations,
            constraint_violation: row_err,
            gap_bound: r.gap_bound,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GibbsSolution {
    pub q_star: DiscreteMeasure,
    pub nu_star: f64,
    pub value: f64,
    /// `E_P[(f*)'(g − ν*)] − 1` before normalization.
    pub mass_error: f64,
}

/// `dQ* = (f*)'(g − ν*) dP` with `ν*` found by bisection.
pub fn gibbs_optimal_measure(p: &DiscreteMeasure, g: &[f64], f: &ConvexGenerator) -> Result<GibbsSolution> {
    if f.a() < 0.0 {
        return invalid("the Gibbs optimizer needs a ≥ 0");
    }
    if !f.admissible() {
        return invalid(format!("generator {} is not admissible", f.name()));
    }
    let w = p.weights();
    if g.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: g.len(),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return invalid("g must be finite");
    }
    let sup = g.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let h = |nu: f64| shift_derivative(f, w, g, nu);
    let (lo, hi) = (-sup - f.nu0() - 1.0, sup - f.nu0() + 1.0);
    if !(h(lo) <= 0.0 && h(hi) >= 0.0) {
        return Err(Error::NonConvergence("Gibbs shift bracket has no sign change".into()));
    }
    let nu = bisect_nondecreasing(h, lo, hi);
    let dens: Vec<f64> = g
        .iter()
        .map(|v| f.f_star_prime(v - nu).ok_or_else(|| Error::NonConvergence("shift outside the domain".into())))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = w.iter().zip(&dens).map(|(a, b)| a * b).collect();
    let mass: f64 = weights.iter().sum();
    let value = shifted_objective(f, w, g, nu).to_f64();
    Ok(GibbsSolution {
        q_star: DiscreteMeasure::normalized(p.points().to_vec(), weights)?,
        nu_star: nu,
        value,
        mass_error: mass - 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    PreTransition,
    PostTransition,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiracExampleSolution {
    pub eta_x2_mass: f64,
    pub divergence_value: f64,
    pub regime: Regime,
    /// Optimal `g` at `x₂` (with `g(x₁) = 0`).
    pub g_star_2: f64,
    pub nu_star: f64,
    /// Transition point in `x₂` beyond which `η*(x₂) = 2/3`.
    pub transition: f64,
}

/// The three-point example `P = ½δ₀ + ½δ_{x₂}`, `Q = ⅓(δ₀ + δ_{x₂} + δ_{x₃})`
/// with `Γ = Lip¹` and `f = f_α`, solved semi-analytically.
pub fn dirac_example(x2: f64, x3: f64, alpha: f64) -> Result<DiracExampleSolution> {
    if !(x2 > 0.0 && x3 > x2 && x3.is_finite()) {
        return invalid("need 0 < x2 < x3");
    }
    if !(alpha > 1.0) {
        return invalid("need alpha > 1");
    }
    let f = crate::generators::make_alpha(alpha)?;
    let half = [0.5, 0.5];
    let nu_of = |g2: f64| -> Result<f64> {
        optimal_shift(&f, &half, &[0.0, g2])
            .ok_or_else(|| Error::NonConvergence(format!("no shift root for g2 = {g2}")))
    };
    let excess = |g2: f64| match nu_of(g2) {
        Ok(nu) => 0.5 * f.f_star_prime(g2 - nu).unwrap_or(f64::INFINITY) - 2.0 / 3.0,
        Err(_) => f64::NAN,
    };
    let (lo, hi) = bracket_nondecreasing(excess, 0.0, 1.0, 1e8)
        .ok_or_else(|| Error::NonConvergence(format!("no transition point found for alpha = {alpha}")))?;
    let transition = bisect_nondecreasing(excess, lo.max(0.0), hi);

    let (regime, g2) = if x2 < transition {
        (Regime::PreTransition, x2)
    } else {
        (Regime::PostTransition, transition)
    };
    let nu = nu_of(g2)?;
    let eta2 = match regime {
        Regime::PreTransition => 0.5 * f.f_star_prime(g2 - nu).unwrap_or(f64::NAN),
        Regime::PostTransition => 2.0 / 3.0,
    };
    let g3 = x3 - x2 + g2;
    let gain = (g2 + g3) / 3.0;
    let value = gain - shifted_objective(&f, &half, &[0.0, g2], nu).to_f64();
    Ok(DiracExampleSolution {
        eta_x2_mass: eta2,
        divergence_value: value,
        regime,
        g_star_2: g2,
        nu_star: nu,
        transition,
    })
}

/// The Dirac configuration as measures on the line.
pub fn dirac_measures(x2: f64, x3: f64) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    let third = 1.0 / 3.0;
    Ok((
        DiscreteMeasure::on_line(&[0.0, x2, x3], &[third, third, 1.0 - 2.0 * third])?,
        DiscreteMeasure::on_line(&[0.0, x2], &[0.5, 0.5])?,
    ))
}

/// `D_f^{Γ_L}(Q‖P)` for each Lipschitz constant in `scales`.
pub fn limit_scan(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
    scales: &[f64],
) -> Result<Vec<(f64, ExtReal)>> {
    scales
        .iter()
        .map(|&s| {
            let g = gamma.with_lip(s)?;
            Ok((s, f_gamma_divergence(q, p, f, &g)?.value))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Maximizing `Q` found for the left-hand side.
    pub q_star: Vec<f64>,
    /// Upper bound on the suboptimality of `lhs` (Frank–Wolfe gap).
    pub gap: f64,
    pub iterations: usize,
    /// Whether `lhs` is attained at the Gibbs measure rather than the search.
    pub from_gibbs: bool,
}

/// `sup_Q {E_Q[g] − D_f^Γ(Q‖P)}` over probability vectors on `points`, next
/// to `Λ_f^P[g]`. `p` is aligned to `points` and may contain zeros.
pub fn dual_check(
    points: &[Vec<f64>],
    p: &[f64],
    f: &ConvexGenerator,
    g: &[f64],
    gamma: &FunctionClassSpec,
) -> Result<DualCheck> {
    if f.a() < 0.0 {
        return invalid("the dual formula is implemented for a ≥ 0 only");
    }
    let n = points.len();
    if p.len() != n || g.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: p.len().min(g.len()),
        });
    }
    if gamma.violation(points, g)? > 1e-9 {
        return invalid("g does not belong to Γ");
    }
    let lam = lambda_f_weights(f, p, g)?;
    let rhs = lam
        .value
        .finite()
        .ok_or_else(|| Error::NonConvergence("Λ is infinite".into()))?;
    let emb = class_embedding(gamma, points)?;
    let opts = SolverOptions::default();

    // Ψ(Q) = Q·g − D(Q) and its gradient g − (g* − ν*).
    let eval = |qv: &[f64]| -> Result<(f64, Vec<f64>)> {
        let out = solve_dual(f, qv, p, &emb.embed, &emb.constraints, emb.unbounded, &opts)?;
        let d = out
            .value
            .finite()
            .ok_or_else(|| Error::NonConvergence("inner divergence is infinite".into()))?;
        let nu = out.nu.unwrap_or(-f.nu0());
        let psi = qv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() - d;
        let grad = g.iter().zip(&out.g).map(|(gi, hi)| gi - (hi - nu)).collect();
        Ok((psi, grad))
    };
    let fw_gap = |qv: &[f64], grad: &[f64]| {
        let top = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top - qv.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut qv = vec![1.0 / n as f64; n];
    let (mut val, mut grad) = eval(&qv)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gap = fw_gap(&qv, &grad);
    // Ψ(Q) ≤ Λ_f^P[g] for every Q when g ∈ Γ, so reaching it is optimal.
    while gap > 1e-9 && val < rhs - 1e-10 && iterations < 50 {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..40 {
            let top = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut cand: Vec<f64> = qv.iter().zip(&grad).map(|(a, b)| a * (step * (b - top)).exp()).collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|v| *v /= s);
            let (cv, cg) = eval(&cand)?;
            if cv >= val {
                qv = cand;
                val = cv;
                grad = cg;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        gap = fw_gap(&qv, &grad);
        if !accepted {
            break;
        }
    }
    // The Gibbs measure (f*)'(g − ν*) P is the candidate maximizer; the
    // search above does not always reach it on the simplex boundary.
    let mut from_gibbs = false;
    if let (true, Some(nu)) = (f.admissible() && val < rhs - 1e-10, lam.nu_star) {
        let w: Option<Vec<f64>> = p
            .iter()
            .zip(g)
            .map(|(pj, gj)| if *pj > 0.0 { f.f_star_prime(gj - nu).map(|d| pj * d) } else { Some(0.0) })
            .collect();
        if let Some(w) = w {
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                let cand: Vec<f64> = w.iter().map(|v| v / s).collect();
                let (cv, cg) = eval(&cand)?;
                if cv > val {
                    gap = fw_gap(&cand, &cg);
                    qv = cand;
                    val = cv;
                    from_gibbs = true;
                }
            }
        }
    }
    Ok(DualCheck {
        lhs: val,
        rhs,
        q_star: qv,
        gap,
        iterations,
        from_gibbs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpiCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `D_f^Γ(K[Q]‖K[P])` against `D_f^{K[Γ]}(Q‖P)`.
///
/// Kernel rows follow the kernel's source points when it has them, else the
/// joint support of `Q` and `P`.
pub fn data_processing_check(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma_on_target: &FunctionClassSpec,
    k: &StochasticKernel,
) -> Result<DpiCheck> {
    let js = joint_support(q, p)?;
    let rows = k.row_indices(&js.points)?;
    let t = k.targets().len();
    let mut qt = vec![0.0; t];
    let mut pt = vec![0.0; t];
    for (a, &r) in rows.iter().enumerate() {
        for (b, kv) in k.matrix()[r].iter().enumerate() {
            qt[b] += js.q[a] * kv;
            pt[b] += js.p[a] * kv;
        }
    }
    let opts = SolverOptions::default();
    let emb = class_embedding(gamma_on_target, k.targets())?;
    let lhs = solve_dual(f, &qt, &pt, &emb.embed, &emb.constraints, emb.unbounded, &opts)?.value;

    let kmat = DMatrix::from_fn(js.len(), t, |a, b| k.matrix()[rows[a]][b]);
    let m = &kmat * &emb.embed;
    let rhs = solve_dual(f, &js.q, &js.p, &m, &emb.constraints, emb.unbounded, &opts)?.value;
    let (lhs, rhs) = (lhs.to_f64(), rhs.to_f64());
    Ok(DpiCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-8,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HessianCheck {
    pub analytic: f64,
    pub numeric: f64,
    /// `E_P[(f*)''(g₀ − ν₀)] = 0`: the formula's strictness assumption fails.
    pub degenerate: bool,
}

/// Second derivative of the objective along `g₀ + εψ`, analytically and by
/// central differences (step `1e-4`). With `nu_aware` the objective is
/// `E_Q[g] − Λ_f^P[g]`, otherwise `E_Q[g] − E_P[f*(g)]`.
pub fn hessian_check(
    f: &ConvexGenerator,
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    g0: &[f64],
    psi: &[f64],
    nu_aware: bool,
) -> Result<HessianCheck> {
    let js = joint_support(q, p)?;
    let n = js.len();
    if g0.len() != n || psi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: g0.len().min(psi.len()),
        });
    }
    let along = |eps: f64| -> Vec<f64> { g0.iter().zip(psi).map(|(a, b)| a + eps * b).collect() };
    let objective = |g: &[f64]| -> Result<f64> {
        let gain: f64 = js.q.iter().zip(g).map(|(a, b)| a * b).sum();
        let cost = if nu_aware {
            lambda_f_weights(f, &js.p, g)?.value
        } else {
            let mut acc = ExtReal::ZERO;
            for (&w, &v) in js.p.iter().zip(g) {
                if w > 0.0 {
                    acc = acc + f.f_star(v).scale(w);
                }
            }
            acc
        };
        cost.finite()
            .map(|c| gain - c)
            .ok_or_else(|| Error::InvalidInput("objective is infinite along the segment".into()))
    };
    let second = |y: f64| {
        f.f_star_second(y)
            .ok_or_else(|| Error::InvalidInput("f* is not twice differentiable here".into()))
    };

    let (analytic, degenerate) = if nu_aware {
        let nu0 = lambda_f_weights(f, &js.p, g0)?
            .nu_star
            .ok_or_else(|| Error::InvalidInput("Λ is infinite at g₀".into()))?;
        let mut w = vec![0.0; n];
        for j in 0..n {
            if js.p[j] > 0.0 {
                w[j] = js.p[j] * second(g0[j] - nu0)?;
            }
        }
        let sw: f64 = w.iter().sum();
        if sw <= 0.0 {
            (0.0, true)
        } else {
            let mean: f64 = w.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>() / sw;
            let var: f64 = w.iter().zip(psi).map(|(a, b)| a * (b - mean) * (b - mean)).sum::<f64>() / sw;
            (-sw * var, false)
        }
    } else {
        let mut acc = 0.0;
        for j in 0..n {
            if js.p[j] > 0.0 {
                acc += js.p[j] * second(g0[j])? * psi[j] * psi[j];
            }
        }
        (-acc, false)
    };
    let h = 1e-4;
    let numeric = (objective(&along(h))? - 2.0 * objective(g0)? + objective(&along(-h))?) / (h * h);
    Ok(HessianCheck {
        analytic,
        numeric,
        degenerate,
    })
}

/// Whether `f*` has a kink at 0 (the α > 1 family), where second-order
/// formulas break down.
pub fn has_kink_at_zero(f: &ConvexGenerator) -> bool {
    matches!(f.kind(), GeneratorKind::Alpha(a) if *a > 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{make_alpha, make_kl};

    fn line(xs: &[f64], ws: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::on_line(xs, ws).unwrap()
    }

    fn lip1() -> FunctionClassSpec {
        FunctionClassSpec::lipschitz(1.0).unwrap()
    }

    #[test]
    fn f_divergence_examples() {
        let f2 = make_alpha(2.0).unwrap();
        let q = line(&[0.0, 1.0], &[0.7, 0.3]);
        let p = line(&[0.0, 1.0], &[0.5, 0.5]);
        assert!((f_divergence(&q, &p, &f2).unwrap().to_f64() - 0.08).abs() < 1e-12);
        assert_eq!(f_divergence(&q, &q, &make_kl()).unwrap(), ExtReal::ZERO);
        let d3 = line(&[3.0], &[1.0]);
        let d1 = line(&[1.0], &[1.0]);
        assert_eq!(f_divergence(&d3, &d1, &f2).unwrap(), ExtReal::PosInf);
    }

    #[test]
    fn gamma_ipm_examples() {
        let t = 2.5;
        let w = gamma_ipm(&line(&[t], &[1.0]), &line(&[0.0], &[1.0]), &lip1()).unwrap();
        assert!((w.value.to_f64() - t).abs() < 1e-12);
        let q = line(&[0.0, 1.0], &[0.3, 0.7]);
        assert_eq!(gamma_ipm(&q, &q, &lip1()).unwrap().value, ExtReal::ZERO);
        let b = FunctionClassSpec::AllBounded { bound: 1.0 };
        let v = gamma_ipm(&line(&[0.0], &[1.0]), &line(&[1.0], &[1.0]), &b).unwrap();
        assert!((v.value.to_f64() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn f_gamma_on_two_diracs() {
        for f in [make_kl(), make_alpha(2.0).unwrap(), make_alpha(5.0).unwrap()] {
            let t = 1.7;
            let s = f_gamma_divergence(&line(&[t], &[1.0]), &line(&[0.0], &[1.0]), &f, &lip1()).unwrap();
            assert!((s.value.to_f64() - t).abs() < 1e-8, "{} {:?}", f.name(), s.value);
        }
    }

    #[test]
    fn f_gamma_vanishes_for_equal_measures() {
        let q = line(&[0.0, 1.0, 2.5], &[0.2, 0.5, 0.3]);
        for f in [make_kl(), make_alpha(2.0).unwrap(), make_alpha(0.5).unwrap()] {
            let s = f_gamma_divergence(&q, &q, &f, &lip1()).unwrap();
            assert!(s.value.to_f64().abs() <= 1e-9, "{:?}", s.value);
            let g = s.g_star.unwrap();
            assert!(g.iter().all(|v| (v - g[0]).abs() < 1e-4), "{g:?}");
        }
    }

    #[test]
    fn primal_and_dual_agree() {
        let q = line(&[0.0, 1.0, 2.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let p = line(&[0.0, 1.0], &[0.5, 0.5]);
        for f in [make_kl(), make_alpha(2.0).unwrap(), make_alpha(5.0).unwrap()] {
            let d = f_gamma_divergence(&q, &p, &f, &lip1()).unwrap().value.to_f64();
            let s = infimal_convolution(&q, &p, &f, &lip1()).unwrap();
            let v = s.value.to_f64();
            assert!((d - v).abs() <= 1e-7 * (1.0 + d.abs()), "{} {d} {v}", f.name());
            assert!(d <= v + 1e-10);
            let eta = s.eta_star.unwrap();
            assert!((eta.total_mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn infconv_of_equal_measures_is_diagonal() {
        let q = line(&[0.0, 1.0, 3.0], &[0.2, 0.5, 0.3]);
        let s = infimal_convolution(&q, &q, &make_alpha(2.0).unwrap(), &lip1()).unwrap();
        assert!(s.value.to_f64().abs() < 1e-8);
        let plan = s.transport_plan.unwrap();
        for (i, row) in plan.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    assert!(*v < 1e-6, "{plan:?}");
                }
            }
        }
        let eta = s.eta_star.unwrap();
        for (w, want) in eta.weights().iter().zip(q.weights()) {
            assert!((w - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gibbs_examples() {
        let p = line(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]);
        let f = make_alpha(2.0).unwrap();
        let c = gibbs_optimal_measure(&p, &[0.4; 3], &f).unwrap();
        for (a, b) in c.q_star.weights().iter().zip(p.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = [0.3, -1.0, 0.8];
        let kl = gibbs_optimal_measure(&p, &g, &make_kl()).unwrap();
        let z: f64 = (0..3).map(|i| p.weights()[i] * f64::exp(g[i])).sum();
        for i in 0..3 {
            assert!((kl.q_star.weights()[i] - p.weights()[i] * g[i].exp() / z).abs() < 1e-12);
        }
        assert!(kl.mass_error.abs() < 1e-12);
        for f in [make_kl(), make_alpha(2.0).unwrap(), make_alpha(5.0).unwrap()] {
            let s = gibbs_optimal_measure(&p, &g, &f).unwrap();
            let l = lambda_f_weights(&f, p.weights(), &g).unwrap().value.to_f64();
            assert!((s.value - l).abs() < 1e-10);
            assert!(s.mass_error.abs() < 1e-10);
        }
        assert!(gibbs_optimal_measure(&p, &g, &make_alpha(0.5).unwrap()).is_err());
    }

    #[test]
    fn dirac_regimes() {
        let pre = dirac_example(0.1, 0.2, 2.0).unwrap();
        assert_eq!(pre.regime, Regime::PreTransition);
        assert!(pre.eta_x2_mass > 1.0 / 3.0 && pre.eta_x2_mass < 2.0 / 3.0);
        let post = dirac_example(2.0, 4.0, 2.0).unwrap();
        assert_eq!(post.regime, Regime::PostTransition);
        assert!((post.eta_x2_mass - 2.0 / 3.0).abs() < 1e-12);
        // f₂: ν(g) = (g − 2)/2 on the two-point P, so the transition sits at 2/3.
        assert!((pre.transition - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn dirac_matches_generic_solver() {
        for (x2, alpha) in [(0.3, 2.0), (1.5, 2.0), (0.5, 1.5), (1.2, 5.0)] {
            let x3 = 2.0 * x2;
            let d = dirac_example(x2, x3, alpha).unwrap();
            let (q, p) = dirac_measures(x2, x3).unwrap();
            let s = infimal_convolution(&q, &p, &make_alpha(alpha).unwrap(), &lip1()).unwrap();
            assert!((s.value.to_f64() - d.divergence_value).abs() < 1e-6, "{x2} {alpha}");
            let eta2 = s.eta_star.unwrap().weight_at(&[x2]);
            assert!((eta2 - d.eta_x2_mass).abs() < 1e-6, "{x2} {alpha} {eta2} {}", d.eta_x2_mass);
        }
    }

    #[test]
    fn limit_scan_monotone() {
        let q = line(&[0.0, 1.0], &[0.8, 0.2]);
        let p = line(&[0.0, 1.0], &[0.4, 0.6]);
        let f = make_alpha(2.0).unwrap();
        let scan = limit_scan(&q, &p, &f, &lip1(), &[0.1, 0.5, 1.0, 10.0, 1e4]).unwrap();
        for w in scan.windows(2) {
            assert!(w[1].1.to_f64() >= w[0].1.to_f64() - 1e-10);
        }
        let df = f_divergence(&q, &p, &f).unwrap().to_f64();
        assert!((scan.last().unwrap().1.to_f64() - df).abs() < 1e-6);
    }

    #[test]
    fn dpi_identity_and_collapse() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let q = DiscreteMeasure::probability(pts.clone(), vec![0.6, 0.3, 0.1]).unwrap();
        let p = DiscreteMeasure::probability(pts.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        let f = make_alpha(2.0).unwrap();
        let id = StochasticKernel::identity(pts.clone()).unwrap();
        let r = data_processing_check(&q, &p, &f, &lip1(), &id).unwrap();
        assert!((r.lhs - r.rhs).abs() < 1e-9 && r.holds);
        let collapse = StochasticKernel::new(vec![vec![0.5, 0.5]; 3], vec![vec![0.0], vec![5.0]], None).unwrap();
        let r = data_processing_check(&q, &p, &f, &lip1(), &collapse).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.holds);
    }

    #[test]
    fn dual_check_kl() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let p = [0.3, 0.3, 0.4];
        let g = [0.2, -0.5, 0.4];
        let r = dual_check(&pts, &p, &make_kl(), &g, &lip1()).unwrap();
        let lse = (0..3).map(|i| p[i] * f64::exp(g[i])).sum::<f64>().ln();
        assert!((r.rhs - lse).abs() < 1e-12);
        assert!((r.lhs - r.rhs).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn hessian_constant_direction() {
        let q = line(&[0.0, 1.0], &[0.3, 0.7]);
        let p = line(&[0.0, 1.0], &[0.6, 0.4]);
        let r = hessian_check(&make_kl(), &q, &p, &[0.1, 0.4], &[1.0, 1.0], true).unwrap();
        assert!(r.analytic.abs() < 1e-15 && r.numeric.abs() < 1e-6);
        let r = hessian_check(&make_kl(), &q, &p, &[0.1, 0.4], &[1.0, -2.0], true).unwrap();
        assert!((r.analytic - r.numeric).abs() < 1e-3 * r.analytic.abs());
    }
}
