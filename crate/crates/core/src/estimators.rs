//! Sample-based estimation with feature-linear discriminators `g_θ = θ·φ`
//! and gradient-penalty soft constraints.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extended::ExtReal;
use crate::functionals::{
    interpolation_points_weighted, lambda_f_weights, log_sum_exp, optimal_shift, shifted_objective,
    DifferentiableFn, FeatureMap, FunctionClassSpec, PenaltySpec, Sidedness,
};
use crate::generators::{ConvexGenerator, GeneratorKind};
use crate::measures::{joint_support, read_numeric_csv, DiscreteMeasure, MetricSpec};
use crate::optim::barrier::{minimize, BarrierOptions, ConvexObjective, Evaluation, LinearConstraints};
use crate::rng;
use crate::solvers::f_gamma_divergence;

/// Sample rows, optionally weighted (weights make it an exact finite measure).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSet {
    rows: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    /// Seed the rows were drawn with, when known.
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return invalid("a sample set needs at least one row");
        }
        let d = rows[0].len();
        if d == 0 {
            return invalid("samples need at least one coordinate");
        }
        for r in &rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return invalid("samples must be finite");
            }
        }
        Ok(SampleSet {
            rows,
            weights: None,
            seed: None,
        })
    }

    /// Rows with nonnegative weights, normalized to sum to one.
    pub fn weighted(rows: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(rows)?;
        if weights.len() != s.rows.len() {
            return Err(Error::DimensionMismatch {
                expected: s.rows.len(),
                found: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(total > 0.0) {
            return invalid("sample weights must be nonnegative with a positive total");
        }
        s.weights = Some(weights.into_iter().map(|w| w / total).collect());
        Ok(s)
    }

    /// The measure itself, as a weighted sample.
    pub fn from_measure(m: &DiscreteMeasure) -> Self {
        SampleSet {
            rows: m.points().to_vec(),
            weights: Some(m.weights().to_vec()),
            seed: None,
        }
    }

    /// `m` independent draws from a discrete measure.
    pub fn draw(measure: &DiscreteMeasure, m: usize, seed: u64, stream: u64) -> Result<Self> {
        if m == 0 {
            return invalid("sample size must be positive");
        }
        let idx = WeightedIndex::new(measure.weights())
            .map_err(|e| Error::InvalidInput(format!("cannot sample from measure: {e}")))?;
        let mut r = rng::stream(seed, stream);
        let rows = (0..m).map(|_| measure.points()[idx.sample(&mut r)].clone()).collect();
        Ok(SampleSet {
            rows,
            weights: None,
            seed: Some(seed),
        })
    }

    /// One sample per CSV row; a non-numeric first row is a header.
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        Self::new(read_numeric_csv(reader)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weights, uniform when none were given.
    pub fn weight_vec(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.rows.len() as f64; self.rows.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Rows in lexicographic order (weights follow their rows).
    pub fn canonical(&self) -> SampleSet {
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_by(|&a, &b| lex_cmp(&self.rows[a], &self.rows[b]));
        SampleSet {
            rows: order.iter().map(|&i| self.rows[i].clone()).collect(),
            weights: self.weights.as_ref().map(|w| order.iter().map(|&i| w[i]).collect()),
            seed: self.seed,
        }
    }

    pub fn empirical_measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::normalized(self.rows.clone(), self.weight_vec())
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Median pairwise distance over (at most 500 evenly strided) rows.
pub fn median_bandwidth(rows: &[Vec<f64>]) -> f64 {
    let stride = rows.len().div_ceil(500).max(1);
    let sub: Vec<&Vec<f64>> = rows.iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(sub.len() * sub.len() / 2);
    for i in 0..sub.len() {
        for j in 0..i {
            d.push(crate::measures::euclidean(sub[i], sub[j]));
        }
    }
    d.retain(|v| *v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Initial step size of the ascent.
    pub step: f64,
    pub max_iter: usize,
    /// Stop once the projected-gradient norm drops below this.
    pub tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 1.0,
            max_iter: 5000,
            tol: 1e-9,
        }
    }
}

/// Where the gradient penalty is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMeasure {
    /// Gradients at `t x_Q + (1 − t) x_P`, Monte Carlo.
    #[default]
    Interpolation,
    /// Difference quotients `|g(x) − g(y)| / |x − y|` over all pairs
    /// `(x, y) ∈ supp Q × supp P`, weighted by `w_Q(x) w_P(y)`. Works for
    /// features without a Jacobian and is exact (no sampling).
    SamplePairs,
}

#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub generator: ConvexGenerator,
    pub features: FeatureMap,
    pub penalty: Option<PenaltySpec>,
    pub penalty_measure: PenaltyMeasure,
    pub optimizer: OptimizerConfig,
    /// Optimize the shift `ν` (exactly, per iterate). Without it KL uses the
    /// log-mean-exp form and other generators fix `ν = 0`.
    pub use_shift: bool,
    pub param_bound: Option<f64>,
    /// Seed for the penalty's interpolation points.
    pub seed: u64,
    pub ceiling: f64,
}

impl EstimatorConfig {
    pub fn new(generator: ConvexGenerator, features: FeatureMap) -> Self {
        EstimatorConfig {
            generator,
            features,
            penalty: None,
            penalty_measure: PenaltyMeasure::Interpolation,
            optimizer: OptimizerConfig::default(),
            use_shift: true,
            param_bound: None,
            seed: 0,
            ceiling: 1e9,
        }
    }

    /// 128 random Fourier features with the median-distance bandwidth of the
    /// pooled samples.
    pub fn default_features(q: &SampleSet, p: &SampleSet, seed: u64) -> Result<FeatureMap> {
        let pooled: Vec<Vec<f64>> = q.rows().iter().chain(p.rows()).cloned().collect();
        FeatureMap::random_fourier(q.dim(), 128, median_bandwidth(&pooled), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer.max_iter == 0 {
            return invalid("iteration budget must be at least 1");
        }
        if !(self.optimizer.step > 0.0 && self.optimizer.step.is_finite()) {
            return invalid("step size must be positive");
        }
        if !(self.optimizer.tol > 0.0) {
            return invalid("tolerance must be positive");
        }
        if self.features.is_empty() {
            return invalid("feature map is empty");
        }
        if let Some(b) = self.param_bound {
            if !(b > 0.0) {
                return invalid("parameter bound must be positive");
            }
        }
        if self.penalty.is_some() && self.penalty_measure == PenaltyMeasure::Interpolation && !self.features.has_jacobian()
        {
            return invalid("the interpolation penalty needs features with a Jacobian");
        }
        if !self.use_shift {
            if let GeneratorKind::Alpha(a) = self.generator.kind() {
                if *a < 1.0 {
                    return invalid("α < 1 requires the shift (f* is infinite at 0)");
                }
            }
        }
        Ok(())
    }
}

enum PenaltyTerms {
    None,
    /// Per point: `∂φ_k/∂x_i` as `m × d` rows.
    Gradient { spec: PenaltySpec, jacobians: Vec<Vec<Vec<f64>>> },
    /// Per pair: weight, distance and `φ(x) − φ(y)`.
    Pairs { spec: PenaltySpec, pairs: Vec<(f64, f64, Vec<f64>)> },
}

/// One evaluation of the penalized objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    /// Penalized objective.
    pub value: f64,
    /// Variational objective without the penalty.
    pub objective: f64,
    pub penalty: f64,
    pub nu: Option<f64>,
    pub gradient: Vec<f64>,
}

/// The penalized empirical objective as a function of `θ`.
pub struct EstimatorObjective {
    f: ConvexGenerator,
    phi_q: Vec<Vec<f64>>,
    wq: Vec<f64>,
    phi_p: Vec<Vec<f64>>,
    wp: Vec<f64>,
    use_shift: bool,
    penalty: PenaltyTerms,
    m: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EstimatorObjective {
    /// Builds the objective on canonically sorted copies of the samples.
    pub fn new(q: &SampleSet, p: &SampleSet, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        if q.dim() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: q.dim(),
                found: p.dim(),
            });
        }
        if let Some(d) = config.features.input_dim() {
            if d != q.dim() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: q.dim(),
                });
            }
        }
        let (q, p) = (q.canonical(), p.canonical());
        let phi_q: Vec<Vec<f64>> = q.rows().iter().map(|x| config.features.eval(x)).collect();
        let phi_p: Vec<Vec<f64>> = p.rows().iter().map(|x| config.features.eval(x)).collect();
        let (wq, wp) = (q.weight_vec(), p.weight_vec());
        let penalty = match (&config.penalty, config.penalty_measure) {
            (None, _) => PenaltyTerms::None,
            (Some(spec), PenaltyMeasure::Interpolation) => {
                let pts = interpolation_points_weighted(
                    q.rows(),
                    q.weights(),
                    p.rows(),
                    p.weights(),
                    spec.interpolation_count,
                    config.seed,
                )?;
                let jacobians = pts
                    .iter()
                    .map(|x| config.features.jacobian(x).expect("validated Jacobian"))
                    .collect();
                PenaltyTerms::Gradient {
                    spec: spec.clone(),
                    jacobians,
                }
            }
            (Some(spec), PenaltyMeasure::SamplePairs) => {
                let mut pairs = Vec::new();
                for (i, x) in q.rows().iter().enumerate() {
                    for (j, y) in p.rows().iter().enumerate() {
                        let c = crate::measures::euclidean(x, y);
                        if c > 0.0 {
                            let diff = phi_q[i].iter().zip(&phi_p[j]).map(|(a, b)| a - b).collect();
                            pairs.push((wq[i] * wp[j], c, diff));
                        }
                    }
                }
                PenaltyTerms::Pairs {
                    spec: spec.clone(),
                    pairs,
                }
            }
        };
        Ok(EstimatorObjective {
            f: config.generator.clone(),
            m: config.features.len(),
            phi_q,
            wq,
            phi_p,
            wp,
            use_shift: config.use_shift,
            penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// Objective and gradient at `θ`; `None` where the objective is `−∞`.
    pub fn evaluate(&self, theta: &[f64]) -> Option<ObjectiveValue> {
        let f = &self.f;
        let gq: Vec<f64> = self.phi_q.iter().map(|r| dot(r, theta)).collect();
        let gp: Vec<f64> = self.phi_p.iter().map(|r| dot(r, theta)).collect();
        let gain = dot(&self.wq, &gq);
        let (cost, eta, nu) = if self.use_shift {
            let nu = optimal_shift(f, &self.wp, &gp)?;
            let cost = shifted_objective(f, &self.wp, &gp, nu).finite()?;
            let eta = self
                .wp
                .iter()
                .zip(&gp)
                .map(|(w, g)| f.f_star_prime(g - nu).map(|d| w * d))
                .collect::<Option<Vec<f64>>>()?;
            (cost, eta, Some(nu))
        } else if let GeneratorKind::Kl = f.kind() {
            let lse = log_sum_exp(&self.wp, &gp);
            let eta = self.wp.iter().zip(&gp).map(|(w, g)| w * (g - lse).exp()).collect();
            (lse, eta, None)
        } else {
            let mut cost = 0.0;
            let mut eta = Vec::with_capacity(gp.len());
            for (w, g) in self.wp.iter().zip(&gp) {
                cost += w * f.f_star(*g).finite()?;
                eta.push(w * f.f_star_prime(*g)?);
            }
            (cost, eta, None)
        };
        let mut gradient = vec![0.0; self.m];
        for (w, row) in self.wq.iter().zip(&self.phi_q) {
            for (gk, r) in gradient.iter_mut().zip(row) {
                *gk += w * r;
            }
        }
        for (e, row) in eta.iter().zip(&self.phi_p) {
            for (gk, r) in gradient.iter_mut().zip(row) {
                *gk -= e * r;
            }
        }
        let penalty = self.penalty_and_gradient(theta, &mut gradient);
        let objective = gain - cost;
        Some(ObjectiveValue {
            value: objective - penalty,
            objective,
            penalty,
            nu,
            gradient,
        })
    }

    /// Adds `−∇penalty` into `grad` and returns the penalty.
    fn penalty_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        match &self.penalty {
            PenaltyTerms::None => 0.0,
            PenaltyTerms::Gradient { spec, jacobians } => {
                let n = jacobians.len() as f64;
                let mut total = 0.0;
                for jac in jacobians {
                    let d = jac.first().map_or(0, Vec::len);
                    let mut gx = vec![0.0; d];
                    for (t, row) in theta.iter().zip(jac) {
                        for (gi, r) in gx.iter_mut().zip(row) {
                            *gi += t * r;
                        }
                    }
                    let s: f64 = gx.iter().map(|v| v * v).sum();
                    total += spec.density(s);
                    let slope = spec.density_slope(s);
                    if slope != 0.0 {
                        // ∂s/∂θ_k = 2 Σ_i gx_i ∂φ_k/∂x_i
                        for (gk, row) in grad.iter_mut().zip(jac) {
                            *gk -= slope * 2.0 * dot(&gx, row) / n;
                        }
                    }
                }
                total / n
            }
            PenaltyTerms::Pairs { spec, pairs } => {
                let mut total = 0.0;
                for (w, c, diff) in pairs {
                    let dg = dot(diff, theta);
                    let s = (dg / c) * (dg / c);
                    total += w * spec.density(s);
                    let slope = spec.density_slope(s);
                    if slope != 0.0 {
                        let coef = w * slope * 2.0 * dg / (c * c);
                        for (gk, dk) in grad.iter_mut().zip(diff) {
                            *gk -= coef * dk;
                        }
                    }
                }
                total
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateResult {
    /// Maximized penalized objective.
    pub value: f64,
    /// Unpenalized objective at the maximizer.
    pub objective: f64,
    pub penalty: f64,
    pub theta: Vec<f64>,
    pub nu: Option<f64>,
    /// Penalized objective per iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes the penalized objective by projected accelerated gradient
/// ascent with backtracking and adaptive restart, starting from `θ = 0`.
pub fn estimate(q: &SampleSet, p: &SampleSet, config: &EstimatorConfig) -> Result<EstimateResult> {
    let obj = EstimatorObjective::new(q, p, config)?;
    let m = obj.dim();
    let bound = config.param_bound;
    let project = |v: &mut [f64]| {
        if let Some(b) = bound {
            v.iter_mut().for_each(|x| *x = x.clamp(-b, b));
        }
    };
    let eval = |theta: &[f64]| -> Result<ObjectiveValue> {
        let e = obj
            .evaluate(theta)
            .ok_or_else(|| Error::NonConvergence("objective left its domain".into()))?;
        if e.value > config.ceiling {
            return Err(Error::Divergence {
                value: e.value,
                ceiling: config.ceiling,
            });
        }
        Ok(e)
    };

    let mut theta = vec![0.0; m];
    let mut cur = eval(&theta)?;
    let mut y = theta.clone();
    let mut at_y = cur.clone();
    let mut momentum = 1.0_f64;
    let mut lip_est = 1.0 / config.optimizer.step;
    let mut trace = vec![cur.value];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.optimizer.max_iter {
        iterations += 1;
        // Backtracking on the quadratic lower model around y.
        let mut accepted = None;
        for _ in 0..80 {
            let mut cand: Vec<f64> = y.iter().zip(&at_y.gradient).map(|(a, g)| a + g / lip_est).collect();
            project(&mut cand);
            let d: Vec<f64> = cand.iter().zip(&y).map(|(a, b)| a - b).collect();
            let dd = dot(&d, &d);
            if let Some(e) = obj.evaluate(&cand) {
                let model = at_y.value + dot(&at_y.gradient, &d) - 0.5 * lip_est * dd;
                if e.value >= model - 1e-13 * (1.0 + at_y.value.abs()) {
                    accepted = Some((cand, e, dd));
                    break;
                }
            }
            lip_est *= 2.0;
        }
        let Some((cand, e, dd)) = accepted else { break };
        if e.value > config.ceiling {
            return Err(Error::Divergence {
                value: e.value,
                ceiling: config.ceiling,
            });
        }
        let step_norm = lip_est * dd.sqrt();
        let prev = std::mem::replace(&mut theta, cand);
        if e.value < cur.value {
            // Objective went down: drop the momentum.
            momentum = 1.0;
            theta = prev;
            y = theta.clone();
            at_y = cur.clone();
            trace.push(cur.value);
            if step_norm < config.optimizer.tol {
                converged = true;
                break;
            }
            continue;
        }
        cur = e;
        trace.push(cur.value);
        if step_norm < config.optimizer.tol {
            converged = true;
            break;
        }
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        momentum = next;
        y = theta.iter().zip(&prev).map(|(a, b)| a + beta * (a - b)).collect();
        project(&mut y);
        at_y = eval(&y)?;
        lip_est *= 0.9;
    }
    Ok(EstimateResult {
        value: cur.value,
        objective: cur.objective,
        penalty: cur.penalty,
        theta,
        nu: cur.nu,
        trace,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenalizedSolution {
    pub value: f64,
    /// Maximizer on the joint support (`g = 0` at the first point).
    pub g: Vec<f64>,
    pub penalty: f64,
    pub iterations: usize,
}

/// Barrier function of the epigraph form of `−q·g + Λ_f^P[g] + V(g)`:
/// variables `(g_1.., t_1..)` with `t_k ≥ 0` and `t_k ≥ Δ_k² / a_k² − 1`,
/// where `Δ_k = g_i − g_j` and `a_k = L c_ij`. The penalty has a kink, so it
/// is lifted into smooth constraints instead of being handed to Newton.
struct PenalizedBarrier<'a> {
    f: &'a ConvexGenerator,
    q: &'a [f64],
    p: &'a [f64],
    /// `(i, j, weight, L c_ij)`.
    pairs: Vec<(usize, usize, f64, f64)>,
    lambda: f64,
    tau: f64,
}

impl PenalizedBarrier<'_> {
    fn penalty(&self, g: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j, w, a)| {
                let r = (g[i] - g[j]) / a;
                w * self.lambda * (r * r - 1.0).max(0.0)
            })
            .sum()
    }

    fn split(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.q.len();
        let mut g = vec![0.0; n];
        g[1..].copy_from_slice(&x.as_slice()[..n - 1]);
        (g, x.as_slice()[n - 1..].to_vec())
    }
}

impl ConvexObjective for PenalizedBarrier<'_> {
    fn dim(&self) -> usize {
        self.q.len() - 1 + self.pairs.len()
    }

    fn evaluate(&self, x: &DVector<f64>, with_hessian: bool) -> Option<Evaluation> {
        let n = self.q.len();
        let dim = n + self.pairs.len();
        let (g, t) = self.split(x);
        let nu = optimal_shift(self.f, self.p, &g)?;
        let lam = shifted_objective(self.f, self.p, &g, nu).finite()?;
        // Full coordinates: g_0..g_{n−1}, then t; g_0 is dropped at the end.
        let mut grad = vec![0.0; dim];
        let mut w = vec![0.0; n];
        for j in 0..n {
            if self.p[j] > 0.0 {
                grad[j] += self.tau * self.p[j] * self.f.f_star_prime(g[j] - nu)?;
                if with_hessian {
                    w[j] = self.p[j] * self.f.f_star_second(g[j] - nu)?;
                }
            }
            grad[j] -= self.tau * self.q[j];
        }
        let mut hess = with_hessian.then(|| {
            let sw: f64 = w.iter().sum();
            DMatrix::from_fn(dim, dim, |a, b| {
                if a >= n || b >= n {
                    return 0.0;
                }
                let diag = if a == b { w[a] } else { 0.0 };
                let v = if sw > 0.0 { diag - w[a] * w[b] / sw } else { diag };
                self.tau * v
            })
        });
        let mut value = self.tau * (lam - dot(self.q, &g));
        for (k, &(i, j, wt, a)) in self.pairs.iter().enumerate() {
            let tk = t[k];
            let dg = g[i] - g[j];
            let u = tk + 1.0 - dg * dg / (a * a);
            if !(tk > 0.0 && u > 0.0) {
                return None;
            }
            value += self.tau * self.lambda * wt * tk - tk.ln() - u.ln();
            let du = 2.0 * dg / (a * a) / u;
            let ti = n + k;
            grad[ti] += self.tau * self.lambda * wt - 1.0 / tk - 1.0 / u;
            grad[i] += du;
            grad[j] -= du;
            if let Some(h) = hess.as_mut() {
                let hdd = 2.0 / (a * a) / u + du * du;
                let hdt = -du / u;
                h[(ti, ti)] += 1.0 / (tk * tk) + 1.0 / (u * u);
                for (r, s) in [(i, 1.0), (j, -1.0)] {
                    h[(r, ti)] += s * hdt;
                    h[(ti, r)] += s * hdt;
                    for (c, s2) in [(i, 1.0), (j, -1.0)] {
                        h[(r, c)] += s * s2 * hdd;
                    }
                }
            }
        }
        Some(Evaluation {
            value,
            gradient: DVector::from_iterator(dim - 1, grad[1..].iter().copied()),
            hessian: hess.map(|h| h.view((1, 1), (dim - 1, dim - 1)).into_owned()),
        })
    }
}

/// `sup_g {E_Q[g] − Λ_f^P[g] − V(g)}` over all functions on the joint
/// support, where `V(g) = λ Σ q_i p_j max{0, (g_i − g_j)² / (L c_ij)² − 1}`
/// is the one-sided penalty on pairs from `supp Q × supp P`.
pub fn penalized_exact_divergence(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    lip: f64,
    metric: &MetricSpec,
    spec: &PenaltySpec,
) -> Result<PenalizedSolution> {
    if spec.sidedness != Sidedness::OneSided {
        return invalid("the exact penalized problem is convex only for the one-sided penalty");
    }
    if !(lip > 0.0) {
        return invalid("Lipschitz constant must be positive");
    }
    let js = joint_support(q, p)?;
    let n = js.len();
    if n == 1 {
        return Ok(PenalizedSolution {
            value: 0.0,
            g: vec![0.0],
            penalty: 0.0,
            iterations: 0,
        });
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && js.q[i] > 0.0 && js.p[j] > 0.0 {
                let c = metric.distance(&js.points[i], &js.points[j])?;
                pairs.push((i, j, js.q[i] * js.p[j], lip * c));
            }
        }
    }
    let k = pairs.len();
    let mut obj = PenalizedBarrier {
        f,
        q: &js.q,
        p: &js.p,
        pairs,
        lambda: spec.lambda,
        tau: 1.0,
    };
    let opts = BarrierOptions {
        max_newton: 500,
        ..BarrierOptions::default()
    };
    let mut x = DVector::from_iterator(n - 1 + k, (0..n - 1 + k).map(|v| if v < n - 1 { 0.0 } else { 1.0 }));
    let mut iterations = 0;
    // Last centered iterate and its gap bound.
    let mut last_good: Option<(DVector<f64>, f64)> = None;
    // Outer barrier loop: the gap after exact centering is 2k / τ.
    loop {
        let gap = 2.0 * k as f64 / obj.tau;
        let r = minimize(&obj, &LinearConstraints::empty(n - 1 + k), None, x.clone(), &opts);
        match r {
            Ok(r) if r.centered => {
                iterations += r.newton_iterations;
                x = r.x;
            }
            // Late stages can stall at rounding level; an earlier centered
            // iterate with a small enough gap is kept instead.
            _ => match last_good {
                Some((good, good_gap)) if good_gap <= 1e-7 => {
                    x = good;
                    break;
                }
                _ => return Err(Error::NonConvergence("penalized problem: centering failed".into())),
            },
        }
        if gap < 1e-9 {
            break;
        }
        last_good = Some((x.clone(), gap));
        obj.tau *= 10.0;
    }
    let (g, _) = obj.split(&x);
    let lam = lambda_f_weights(f, &js.p, &g)?.value;
    let gain: f64 = js.q.iter().zip(&g).map(|(a, b)| a * b).sum();
    let penalty = obj.penalty(&g);
    let value = (ExtReal::Finite(gain) - lam).to_f64() - penalty;
    if value < 0.0 {
        return Ok(PenalizedSolution {
            value: 0.0,
            g: vec![0.0; n],
            penalty: 0.0,
            iterations,
        });
    }
    Ok(PenalizedSolution {
        value,
        g,
        penalty,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub mean_estimate: f64,
    pub std_error: f64,
    pub true_value: f64,
    /// `mean_estimate ≥ true_value − 2 · std_error`.
    pub upward_bias: bool,
    pub estimates: Vec<f64>,
}

/// Average exact divergence between `m`-sample empirical measures over
/// independent trials, next to the population value.
pub fn bias_experiment(
    q: &DiscreteMeasure,
    p: &DiscreteMeasure,
    f: &ConvexGenerator,
    gamma: &FunctionClassSpec,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if trials < 2 {
        return invalid("need at least two trials");
    }
    let true_value = f_gamma_divergence(q, p, f, gamma)?
        .value
        .finite()
        .ok_or_else(|| Error::InvalidInput("population divergence is infinite".into()))?;
    let estimates: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let qs = SampleSet::draw(q, m, seed, 2 * t)?.empirical_measure()?;
            let ps = SampleSet::draw(p, m, seed, 2 * t + 1)?.empirical_measure()?;
            f_gamma_divergence(&qs, &ps, f, gamma)?
                .value
                .finite()
                .ok_or_else(|| Error::NonConvergence("empirical divergence is infinite".into()))
        })
        .collect::<Result<_>>()?;
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let var = estimates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    let std_error = (var / k).sqrt();
    Ok(BiasReport {
        mean_estimate: mean,
        std_error,
        true_value,
        upward_bias: mean >= true_value - 2.0 * std_error,
        estimates,
    })
}

/// Piecewise-linear interpolant of grid values on `[x0, x0 + (n−1) h]`.
pub struct GridInterpolant {
    pub x0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl GridInterpolant {
    fn cell(&self, x: f64) -> usize {
        let k = ((x - self.x0) / self.h).floor();
        (k.max(0.0) as usize).min(self.values.len() - 2)
    }

    pub fn slope(&self, k: usize) -> f64 {
        (self.values[k + 1] - self.values[k]) / self.h
    }
}

impl DifferentiableFn for GridInterpolant {
    fn value(&self, x: &[f64]) -> f64 {
        let k = self.cell(x[0]);
        let t = (x[0] - (self.x0 + k as f64 * self.h)) / self.h;
        self.values[k] + t * (self.values[k + 1] - self.values[k])
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![self.slope(self.cell(x[0]))]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleResult {
    pub one_sided_at_opt: f64,
    pub two_sided_at_opt: f64,
    pub grad_norm_max: f64,
    pub grid_step: f64,
    /// Share of the interpolation measure on `|x| < 1`.
    pub rho_interior: f64,
}

/// Both penalties at the exact KL optimizer `g* = log dQ/dP` for
/// `dQ/dP ∝ exp(−min(|x|, 1)/2)` on a uniform grid over `[−3, 3]`.
pub fn penalty_counterexample(
    lambda: f64,
    lip: f64,
    grid_points: usize,
    interpolation_count: usize,
    seed: u64,
) -> Result<CounterexampleResult> {
    if grid_points < 3 {
        return invalid("need at least three grid points");
    }
    let h = 6.0 / (grid_points - 1) as f64;
    let xs: Vec<f64> = (0..grid_points).map(|k| -3.0 + k as f64 * h).collect();
    let log_ratio: Vec<f64> = xs.iter().map(|x| -x.abs().min(1.0) / 2.0).collect();
    let z: f64 = log_ratio.iter().map(|v| v.exp()).sum::<f64>() / grid_points as f64;
    let g: Vec<f64> = log_ratio.iter().map(|v| v - z.ln()).collect();
    let pw = vec![1.0 / grid_points as f64; grid_points];
    let qw: Vec<f64> = g.iter().zip(&pw).map(|(a, b)| a.exp() * b).collect();
    let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();

    let interp = GridInterpolant {
        x0: -3.0,
        h,
        values: g,
    };
    let grad_norm_max = (0..grid_points - 1).map(|k| interp.slope(k).abs()).fold(0.0, f64::max);
    let rho = interpolation_points_weighted(&pts, Some(&qw), &pts, Some(&pw), interpolation_count, seed)?;
    let rho_interior = rho.iter().filter(|x| x[0].abs() < 1.0).count() as f64 / rho.len() as f64;
    let one = PenaltySpec::new(lambda, lip, Sidedness::OneSided, interpolation_count)?;
    let two = PenaltySpec::new(lambda, lip, Sidedness::TwoSided, interpolation_count)?;
    Ok(CounterexampleResult {
        one_sided_at_opt: crate::functionals::penalty_on_points(&interp, &rho, &one),
        two_sided_at_opt: crate::functionals::penalty_on_points(&interp, &rho, &two),
        grad_norm_max,
        grid_step: h,
        rho_interior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{make_alpha, make_kl};
    use crate::solvers::f_divergence;

    fn line_samples(xs: &[f64]) -> SampleSet {
        SampleSet::new(xs.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    #[test]
    fn identical_samples_give_zero() {
        let s = line_samples(&[0.1, -0.4, 1.3, 0.7, 2.2, -1.0]);
        let features = FeatureMap::random_fourier(1, 32, 1.0, 4).unwrap();
        for f in [make_kl(), make_alpha(2.0).unwrap()] {
            let mut cfg = EstimatorConfig::new(f, features.clone());
            cfg.penalty = Some(PenaltySpec::new(1.0, 1.0, Sidedness::OneSided, 64).unwrap());
            let r = estimate(&s, &s, &cfg).unwrap();
            assert!(r.value.abs() <= 1e-6, "{}", r.value);
        }
    }

    #[test]
    fn exact_mode_matches_solver() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.5]];
        let q = DiscreteMeasure::probability(pts.clone(), vec![0.5, 0.3, 0.2]).unwrap();
        let p = DiscreteMeasure::probability(pts.clone(), vec![0.2, 0.3, 0.5]).unwrap();
        for f in [make_kl(), make_alpha(2.0).unwrap()] {
            let mut cfg = EstimatorConfig::new(f.clone(), FeatureMap::grid(pts.clone()).unwrap());
            cfg.param_bound = Some(0.4);
            let r = estimate(&SampleSet::from_measure(&q), &SampleSet::from_measure(&p), &cfg).unwrap();
            let exact = f_gamma_divergence(&q, &p, &f, &FunctionClassSpec::AllBounded { bound: 0.4 }).unwrap();
            assert!((r.value - exact.value.to_f64()).abs() < 1e-4, "{} {}", r.value, exact.value);
        }
    }

    #[test]
    fn kl_without_shift_is_log_mean_exp() {
        let q = line_samples(&[0.0, 0.5, 1.0]);
        let p = line_samples(&[-0.5, 0.2, 0.9, 1.4]);
        let features = FeatureMap::polynomial(1, 2).unwrap();
        let mut cfg = EstimatorConfig::new(make_kl(), features.clone());
        cfg.use_shift = false;
        let obj = EstimatorObjective::new(&q, &p, &cfg).unwrap();
        let theta = [0.3, -0.2];
        let g = |x: f64| theta[0] * x + theta[1] * x * x;
        let want = [0.0, 0.5, 1.0].iter().map(|&x| g(x)).sum::<f64>() / 3.0
            - ([-0.5, 0.2, 0.9, 1.4].iter().map(|&x| g(x).exp()).sum::<f64>() / 4.0).ln();
        let e = obj.evaluate(&theta).unwrap();
        assert!((e.value - want).abs() < 1e-12);
        assert!(e.nu.is_none());
    }

    #[test]
    fn permutation_invariance() {
        let q = line_samples(&[0.3, -1.2, 2.0, 0.8]);
        let qp = line_samples(&[2.0, 0.8, 0.3, -1.2]);
        let p = line_samples(&[0.0, 1.0, -0.5]);
        let mut cfg = EstimatorConfig::new(make_alpha(2.0).unwrap(), FeatureMap::random_fourier(1, 16, 1.0, 2).unwrap());
        cfg.penalty = Some(PenaltySpec::new(1.0, 1.0, Sidedness::OneSided, 50).unwrap());
        cfg.optimizer.max_iter = 200;
        let a = estimate(&q, &p, &cfg).unwrap();
        let b = estimate(&qp, &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn penalized_exact_sandwich() {
        let q = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0], &[0.5, 0.3, 0.2]).unwrap();
        let p = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]).unwrap();
        let f = make_alpha(2.0).unwrap();
        let lo = f_gamma_divergence(&q, &p, &f, &FunctionClassSpec::lipschitz(0.2).unwrap())
            .unwrap()
            .value
            .to_f64();
        let hi = f_divergence(&q, &p, &f).unwrap().to_f64();
        for lambda in [0.1, 1.0, 10.0] {
            let spec = PenaltySpec::new(lambda, 0.2, Sidedness::OneSided, 1).unwrap();
            let v = penalized_exact_divergence(&q, &p, &f, 0.2, &MetricSpec::Euclidean, &spec).unwrap();
            assert!(v.value >= lo - 1e-6 && v.value <= hi + 1e-6, "{lo} {} {hi}", v.value);
        }
    }

    #[test]
    fn counterexample_penalties() {
        let r = penalty_counterexample(2.0, 1.0, 601, 20_000, 7).unwrap();
        assert!((r.grid_step - 0.01).abs() < 1e-15);
        assert!(r.grad_norm_max <= 0.5 + r.grid_step);
        assert_eq!(r.one_sided_at_opt, 0.0);
        assert!(r.two_sided_at_opt > 0.2 * 2.0 * r.rho_interior);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let q = line_samples(&[0.3, -1.2, 2.0, 0.8, 1.1]);
        let p = line_samples(&[0.0, 1.0, -0.5, 0.4]);
        for (f, shift) in [(make_kl(), true), (make_kl(), false), (make_alpha(2.0).unwrap(), true)] {
            for measure in [PenaltyMeasure::Interpolation, PenaltyMeasure::SamplePairs] {
                let mut cfg = EstimatorConfig::new(f.clone(), FeatureMap::random_fourier(1, 6, 1.0, 9).unwrap());
                cfg.use_shift = shift;
                cfg.penalty = Some(PenaltySpec::new(0.7, 0.3, Sidedness::TwoSided, 40).unwrap());
                cfg.penalty_measure = measure;
                let obj = EstimatorObjective::new(&q, &p, &cfg).unwrap();
                let theta = [0.4, -0.3, 0.2, 0.5, -0.1, 0.25];
                let e = obj.evaluate(&theta).unwrap();
                for k in 0..theta.len() {
                    let h = 1e-6;
                    let (mut a, mut b) = (theta, theta);
                    a[k] += h;
                    b[k] -= h;
                    let fd = (obj.evaluate(&a).unwrap().value - obj.evaluate(&b).unwrap().value) / (2.0 * h);
                    let g = e.gradient[k];
                    assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-2), "{k}: {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn penalty_lowers_the_estimate() {
        let q = line_samples(&[0.3, -1.2, 2.0, 0.8, 1.1, 2.4]);
        let p = line_samples(&[0.0, 1.0, -0.5, 0.4, -1.5]);
        let mut cfg = EstimatorConfig::new(make_kl(), FeatureMap::random_fourier(1, 16, 1.0, 3).unwrap());
        cfg.param_bound = Some(5.0);
        cfg.optimizer.max_iter = 3000;
        let free = estimate(&q, &p, &cfg).unwrap();
        cfg.penalty = Some(PenaltySpec::new(5.0, 0.2, Sidedness::OneSided, 200).unwrap());
        let pen = estimate(&q, &p, &cfg).unwrap();
        assert!(pen.value <= free.value + 1e-9);
        assert!(pen.objective <= free.objective + 1e-6);
        assert!(pen.trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_samples() {
        let s = SampleSet::from_csv_reader("x1,x2\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dim(), 2);
    }
}
