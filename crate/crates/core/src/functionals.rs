//! Variational building blocks: `Λ_f^P`, the joint objective `H`, function
//! classes Γ, feature maps and gradient penalties.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extended::ExtReal;
use crate::generators::{ConvexGenerator, GeneratorKind};
use crate::measures::{DiscreteMeasure, JointSupport, MetricSpec, POINT_TOL};
use crate::optim::scalar::{bisect_nondecreasing, bracket_nondecreasing};
use crate::rng;

/// Result of the inner minimization over the shift `ν`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaValue {
    pub value: ExtReal,
    /// Minimizing shift; `None` when the infimum is `+∞`.
    pub nu_star: Option<f64>,
}

/// `log Σ p_j e^{g_j}` over entries with `p_j > 0`.
pub fn log_sum_exp(p: &[f64], g: &[f64]) -> f64 {
    let m = p
        .iter()
        .zip(g)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = p
        .iter()
        .zip(g)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * (v - m).exp())
        .sum();
    m + s.ln()
}

/// `ν + Σ p_j f*(g_j − ν)`, skipping atoms with zero weight.
pub fn shifted_objective(f: &ConvexGenerator, p: &[f64], g: &[f64], nu: f64) -> ExtReal {
    let mut acc = ExtReal::Finite(nu);
    for (&w, &v) in p.iter().zip(g) {
        if w > 0.0 {
            acc = acc + f.f_star(v - nu).scale(w);
        }
    }
    acc
}

/// `1 − Σ p_j (f*)'(g_j − ν)`: the ν-derivative of the shifted objective,
/// nondecreasing in ν; `−∞` where some argument leaves `{f* < ∞}`.
pub fn shift_derivative(f: &ConvexGenerator, p: &[f64], g: &[f64], nu: f64) -> f64 {
    let mut s = 0.0;
    for (&w, &v) in p.iter().zip(g) {
        if w > 0.0 {
            match f.f_star_prime(v - nu) {
                Some(d) => s += w * d,
                None => return f64::NEG_INFINITY,
            }
        }
    }
    1.0 - s
}

/// Root of [`shift_derivative`] in ν, or `None` when no bracket is found.
pub fn optimal_shift(f: &ConvexGenerator, p: &[f64], g: &[f64]) -> Option<f64> {
    let active = || p.iter().zip(g).filter(|(w, _)| **w > 0.0).map(|(_, v)| *v);
    let gmin = active().fold(f64::INFINITY, f64::min);
    let gmax = active().fold(f64::NEG_INFINITY, f64::max);
    if !(gmin.is_finite() && gmax.is_finite()) {
        return None;
    }
    if let GeneratorKind::Kl = f.kind() {
        return Some(log_sum_exp(p, g) - 1.0);
    }
    // Each term is at most 1 once every argument is ≤ ν₀, and at least 1 once
    // every argument is ≥ ν₀, so the root lies in [gmin − ν₀, gmax − ν₀].
    let h = |nu: f64| shift_derivative(f, p, g, nu);
    let pad = 1e-9 * (1.0 + gmax.abs().max(gmin.abs()));
    let (lo, hi) = bracket_nondecreasing(h, gmin - f.nu0() - pad, gmax - f.nu0() + pad, 1e12)?;
    Some(bisect_nondecreasing(h, lo, hi))
}

/// `Λ_f^P[g] = inf_ν {ν + Σ p_j f*(g_j − ν)}` with weights `p` aligned to `g`.
pub fn lambda_f_weights(f: &ConvexGenerator, p: &[f64], g: &[f64]) -> Result<LambdaValue> {
    if p.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: g.len(),
        });
    }
    if g.iter().zip(p).any(|(v, w)| *w > 0.0 && !v.is_finite()) {
        return invalid("g must be finite on the support of P");
    }
    if let GeneratorKind::Kl = f.kind() {
        let lse = log_sum_exp(p, g);
        return Ok(LambdaValue {
            value: ExtReal::Finite(lse),
            nu_star: Some(lse - 1.0),
        });
    }
    match optimal_shift(f, p, g) {
        Some(nu) => {
            let value = shifted_objective(f, p, g, nu);
            Ok(LambdaValue {
                nu_star: value.is_finite().then_some(nu),
                value,
            })
        }
        None => Ok(LambdaValue {
            value: ExtReal::PosInf,
            nu_star: None,
        }),
    }
}

/// `Λ_f^P[g]` for `g` given on the support of `P` (in its point order).
pub fn lambda_f(f: &ConvexGenerator, p: &DiscreteMeasure, g: &[f64]) -> Result<LambdaValue> {
    lambda_f_weights(f, p.weights(), g)
}

/// `Σ q_i (g_i − ν) − Σ p_j f*(g_j − ν)` on the joint support.
pub fn objective_h(f: &ConvexGenerator, js: &JointSupport, g: &[f64], nu: f64) -> Result<ExtReal> {
    objective_h_weights(f, &js.q, &js.p, g, nu)
}

pub fn objective_h_weights(f: &ConvexGenerator, q: &[f64], p: &[f64], g: &[f64], nu: f64) -> Result<ExtReal> {
    if q.len() != g.len() || p.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            found: q.len().max(p.len()),
        });
    }
    let gain: f64 = q.iter().zip(g).map(|(w, v)| w * (v - nu)).sum();
    let mut cost = ExtReal::ZERO;
    for (&w, &v) in p.iter().zip(g) {
        if w > 0.0 {
            cost = cost + f.f_star(v - nu).scale(w);
        }
    }
    Ok(ExtReal::Finite(gain) - cost)
}

/// Fixed features `φ: R^d → R^m` for discriminators `g_θ = θ·φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    /// `sqrt(2/m) cos(ω_k·x + b_k)`.
    RandomFourier { omegas: Vec<Vec<f64>>, phases: Vec<f64> },
    /// Monomials `Π x_i^{e_i}` with the listed exponent vectors.
    Polynomial { exponents: Vec<Vec<u32>> },
    /// Indicators of the listed points.
    Grid { points: Vec<Vec<f64>> },
}

impl FeatureMap {
    /// `m` random Fourier features for a Gaussian kernel of the given bandwidth.
    pub fn random_fourier(d: usize, m: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return invalid("random Fourier features need d ≥ 1 and m ≥ 1");
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return invalid("bandwidth must be positive");
        }
        let mut r = rng::stream(seed, 0xF0);
        let omegas = (0..m)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z / bandwidth
                    })
                    .collect()
            })
            .collect();
        let phases = (0..m).map(|_| r.random::<f64>() * std::f64::consts::TAU).collect();
        Ok(FeatureMap::RandomFourier { omegas, phases })
    }

    /// All monomials of total degree `1..=degree` in `d` variables.
    pub fn polynomial(d: usize, degree: u32) -> Result<Self> {
        if d == 0 || degree == 0 {
            return invalid("polynomial features need d ≥ 1 and degree ≥ 1");
        }
        let mut exponents = Vec::new();
        let mut current = vec![0u32; d];
        fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if i == cur.len() {
                if cur.iter().sum::<u32>() > 0 {
                    out.push(cur.clone());
                }
                return;
            }
            for e in 0..=left {
                cur[i] = e;
                rec(i + 1, left - e, cur, out);
            }
            cur[i] = 0;
        }
        rec(0, degree, &mut current, &mut exponents);
        exponents.sort_by_key(|e| e.iter().sum::<u32>());
        Ok(FeatureMap::Polynomial { exponents })
    }

    pub fn grid(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return invalid("grid features need at least one point");
        }
        Ok(FeatureMap::Grid { points })
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureMap::RandomFourier { phases, .. } => phases.len(),
            FeatureMap::Polynomial { exponents } => exponents.len(),
            FeatureMap::Grid { points } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            FeatureMap::RandomFourier { omegas, .. } => omegas.first().map(Vec::len),
            FeatureMap::Polynomial { exponents } => exponents.first().map(Vec::len),
            FeatureMap::Grid { points } => points.first().map(Vec::len),
        }
    }

    pub fn has_jacobian(&self) -> bool {
        !matches!(self, FeatureMap::Grid { .. })
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::RandomFourier { omegas, phases } => {
                let scale = (2.0 / phases.len() as f64).sqrt();
                omegas
                    .iter()
                    .zip(phases)
                    .map(|(w, b)| scale * (dot(w, x) + b).cos())
                    .collect()
            }
            FeatureMap::Polynomial { exponents } => exponents
                .iter()
                .map(|e| e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product())
                .collect(),
            FeatureMap::Grid { points } => points
                .iter()
                .map(|p| {
                    let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 <= POINT_TOL * POINT_TOL {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    /// `∂φ_k/∂x_i` as `m` rows of length `d`; `None` for indicator features.
    pub fn jacobian(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        match self {
            FeatureMap::RandomFourier { omegas, phases } => {
                let scale = (2.0 / phases.len() as f64).sqrt();
                Some(
                    omegas
                        .iter()
                        .zip(phases)
                        .map(|(w, b)| {
                            let s = -scale * (dot(w, x) + b).sin();
                            w.iter().map(|wi| s * wi).collect()
                        })
                        .collect(),
                )
            }
            FeatureMap::Polynomial { exponents } => Some(
                exponents
                    .iter()
                    .map(|e| {
                        (0..x.len())
                            .map(|i| {
                                if e[i] == 0 {
                                    return 0.0;
                                }
                                let mut v = e[i] as f64 * x[i].powi(e[i] as i32 - 1);
                                for (j, (&k, &xj)) in e.iter().zip(x).enumerate() {
                                    if j != i {
                                        v *= xj.powi(k as i32);
                                    }
                                }
                                v
                            })
                            .collect()
                    })
                    .collect(),
            ),
            FeatureMap::Grid { .. } => None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The test-function class Γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionClassSpec {
    /// `|g(x) − g(y)| ≤ L c(x, y)`, optionally with `|g| ≤ B`.
    Lipschitz {
        lip: f64,
        #[serde(default)]
        metric: MetricSpec,
        #[serde(default)]
        bound: Option<f64>,
    },
    /// `|g| ≤ B`.
    AllBounded { bound: f64 },
    /// `g = θ·φ`, optionally with `|θ_k| ≤ param_bound`.
    FeatureLinear {
        features: FeatureMap,
        #[serde(default)]
        param_bound: Option<f64>,
    },
}

/// A pairwise constraint `g_i − g_j ≤ cap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairConstraint {
    pub i: usize,
    pub j: usize,
    pub cap: f64,
}

impl FunctionClassSpec {
    pub fn lipschitz(lip: f64) -> Result<Self> {
        let s = FunctionClassSpec::Lipschitz {
            lip,
            metric: MetricSpec::Euclidean,
            bound: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                invalid(format!("{what} must be positive and finite, got {v}"))
            }
        };
        match self {
            FunctionClassSpec::Lipschitz { lip, bound, .. } => {
                positive(*lip, "Lipschitz constant")?;
                if let Some(b) = bound {
                    positive(*b, "bound")?;
                }
                Ok(())
            }
            FunctionClassSpec::AllBounded { bound } => positive(*bound, "bound"),
            FunctionClassSpec::FeatureLinear { features, param_bound } => {
                if features.is_empty() {
                    return invalid("feature map is empty");
                }
                if let Some(b) = param_bound {
                    positive(*b, "parameter bound")?;
                }
                Ok(())
            }
        }
    }

    /// Same class with the Lipschitz constant replaced by `lip`.
    pub fn with_lip(&self, lip: f64) -> Result<Self> {
        match self {
            FunctionClassSpec::Lipschitz { metric, bound, .. } => {
                let s = FunctionClassSpec::Lipschitz {
                    lip,
                    metric: metric.clone(),
                    bound: *bound,
                };
                s.validate()?;
                Ok(s)
            }
            _ => invalid("only Lipschitz classes can be rescaled"),
        }
    }

    /// Γ + c = Γ for all constants c.
    pub fn is_shift_invariant(&self) -> bool {
        matches!(self, FunctionClassSpec::Lipschitz { bound: None, .. })
    }

    pub fn bound(&self) -> Option<f64> {
        match self {
            FunctionClassSpec::Lipschitz { bound, .. } => *bound,
            FunctionClassSpec::AllBounded { bound } => Some(*bound),
            FunctionClassSpec::FeatureLinear { .. } => None,
        }
    }

    /// All ordered pairs `g_i − g_j ≤ L c(x_i, x_j)` on `points`.
    pub fn pair_constraints(&self, points: &[Vec<f64>]) -> Result<Vec<PairConstraint>> {
        match self {
            FunctionClassSpec::Lipschitz { lip, metric, .. } => {
                let mut out = Vec::with_capacity(points.len() * points.len());
                for i in 0..points.len() {
                    for j in 0..points.len() {
                        if i != j {
                            let c = metric.distance(&points[i], &points[j])?;
                            out.push(PairConstraint { i, j, cap: lip * c });
                        }
                    }
                }
                Ok(out)
            }
            FunctionClassSpec::AllBounded { .. } => Ok(Vec::new()),
            FunctionClassSpec::FeatureLinear { .. } => invalid("feature-linear classes have no pairwise form"),
        }
    }

    /// Largest constraint violation of `g` on `points` (0 when feasible).
    pub fn violation(&self, points: &[Vec<f64>], g: &[f64]) -> Result<f64> {
        let mut worst = 0.0_f64;
        for c in self.pair_constraints(points)? {
            worst = worst.max(g[c.i] - g[c.j] - c.cap);
        }
        if let Some(b) = self.bound() {
            for v in g {
                worst = worst.max(v.abs() - b);
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    OneSided,
    TwoSided,
}

impl std::str::FromStr for Sidedness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "one-sided" => Ok(Sidedness::OneSided),
            "two" | "two-sided" => Ok(Sidedness::TwoSided),
            _ => invalid(format!("unknown penalty sidedness {s:?}")),
        }
    }
}

/// Gradient-penalty configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub lip: f64,
    pub sidedness: Sidedness,
    pub interpolation_count: usize,
}

impl PenaltySpec {
    pub fn new(lambda: f64, lip: f64, sidedness: Sidedness, interpolation_count: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return invalid("penalty strength must be positive");
        }
        if !(lip > 0.0 && lip.is_finite()) {
            return invalid("penalty Lipschitz constant must be positive");
        }
        if interpolation_count == 0 {
            return invalid("need at least one interpolation sample");
        }
        Ok(PenaltySpec {
            lambda,
            lip,
            sidedness,
            interpolation_count,
        })
    }

    /// Penalty density at a point with `‖∇g‖² = s`.
    pub fn density(&self, s: f64) -> f64 {
        let l2 = self.lip * self.lip;
        match self.sidedness {
            Sidedness::OneSided => self.lambda * (s / l2 - 1.0).max(0.0),
            Sidedness::TwoSided => {
                let r = s.sqrt() / self.lip - 1.0;
                self.lambda * r * r
            }
        }
    }

    /// `d density / d s`.
    pub fn density_slope(&self, s: f64) -> f64 {
        let l2 = self.lip * self.lip;
        match self.sidedness {
            Sidedness::OneSided => {
                if s > l2 {
                    self.lambda / l2
                } else {
                    0.0
                }
            }
            Sidedness::TwoSided => {
                if s > 0.0 {
                    let n = s.sqrt();
                    self.lambda * (n / self.lip - 1.0) / (self.lip * n)
                } else {
                    0.0
                }
            }
        }
    }
}

/// A scalar function on `R^d` with an analytic gradient.
pub trait DifferentiableFn {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Adapter from a pair of closures.
pub struct FnWithGradient<F, G> {
    pub f: F,
    pub grad: G,
}

impl<F, G> DifferentiableFn for FnWithGradient<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

/// `g_θ = θ·φ` for a differentiable feature map.
pub struct FeatureLinearFn<'a> {
    pub features: &'a FeatureMap,
    pub theta: &'a [f64],
}

impl DifferentiableFn for FeatureLinearFn<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        dot(self.theta, &self.features.eval(x))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let jac = self.features.jacobian(x).expect("feature map without a Jacobian");
        let mut g = vec![0.0; x.len()];
        for (t, row) in self.theta.iter().zip(&jac) {
            for (gi, r) in g.iter_mut().zip(row) {
                *gi += t * r;
            }
        }
        g
    }
}

/// Points `t x_Q + (1 − t) x_P` with independent uniform indices and
/// `t ~ Unif[0, 1]`, reproducible from `seed`.
pub fn interpolation_points(q: &[Vec<f64>], p: &[Vec<f64>], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    interpolation_points_weighted(q, None, p, None, n, seed)
}

/// As [`interpolation_points`], drawing the endpoints by the given weights.
pub fn interpolation_points_weighted(
    q: &[Vec<f64>],
    q_weights: Option<&[f64]>,
    p: &[Vec<f64>],
    p_weights: Option<&[f64]>,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if q.is_empty() || p.is_empty() {
        return invalid("interpolation needs nonempty sample sets");
    }
    let picker = |len: usize, w: Option<&[f64]>| -> Result<Option<WeightedIndex<f64>>> {
        match w {
            None => Ok(None),
            Some(w) if w.len() == len => WeightedIndex::new(w)
                .map(Some)
                .map_err(|e| Error::InvalidInput(format!("bad sample weights: {e}"))),
            Some(w) => Err(Error::DimensionMismatch {
                expected: len,
                found: w.len(),
            }),
        }
    };
    let (qi, pi) = (picker(q.len(), q_weights)?, picker(p.len(), p_weights)?);
    let mut r = rng::stream(seed, 0x1A);
    let draw = |len: usize, w: &Option<WeightedIndex<f64>>, r: &mut rand_chacha::ChaCha8Rng| match w {
        Some(w) => w.sample(r),
        None => r.random_range(0..len),
    };
    Ok((0..n)
        .map(|_| {
            let xq = &q[draw(q.len(), &qi, &mut r)];
            let xp = &p[draw(p.len(), &pi, &mut r)];
            let t: f64 = r.random();
            xq.iter().zip(xp).map(|(a, b)| t * a + (1.0 - t) * b).collect()
        })
        .collect())
}

/// Monte Carlo gradient penalty of `gfun` under the interpolation measure.
pub fn gradient_penalty(
    gfun: &dyn DifferentiableFn,
    q_samples: &[Vec<f64>],
    p_samples: &[Vec<f64>],
    spec: &PenaltySpec,
    seed: u64,
) -> Result<f64> {
    let pts = interpolation_points(q_samples, p_samples, spec.interpolation_count, seed)?;
    Ok(penalty_on_points(gfun, &pts, spec))
}

/// Average penalty density over the given points.
pub fn penalty_on_points(gfun: &dyn DifferentiableFn, pts: &[Vec<f64>], spec: &PenaltySpec) -> f64 {
    let total: f64 = pts
        .iter()
        .map(|x| {
            let s: f64 = gfun.gradient(x).iter().map(|v| v * v).sum();
            spec.density(s)
        })
        .sum();
    total / pts.len() as f64
}
