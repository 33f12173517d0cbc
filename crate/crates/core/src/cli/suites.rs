//! Randomized invariant suites behind `fgamma proptest`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{invalid, Result};
use crate::estimators::{bias_experiment, penalty_counterexample};
use crate::functionals::{gradient_penalty, FnWithGradient, FunctionClassSpec, PenaltySpec, Sidedness};
use crate::generators::ConvexGenerator;
use crate::instances::{random_pair, random_weights, standard_generators, SupportLayout};
use crate::measures::{joint_support, DiscreteMeasure, StochasticKernel};
use crate::rng;
use crate::solvers::{
    data_processing_check, dual_check, f_divergence, f_gamma_divergence, gamma_ipm, hessian_check,
    infimal_convolution, limit_scan,
};

pub const SUITES: [&str; 9] = [
    "sandwich",
    "divergence-property",
    "infconv",
    "limits",
    "dual",
    "dpi",
    "hessian",
    "bias",
    "penalty",
];

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub index: usize,
    pub pass: bool,
    pub detail: Value,
    /// The offending instance, kept only for failures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<Value>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

struct Outcome {
    pass: bool,
    detail: Value,
    instance: Value,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn pair_json(q: &DiscreteMeasure, p: &DiscreteMeasure, f: &ConvexGenerator, extra: Value) -> Value {
    json!({ "q": q, "p": p, "f": f.name(), "extra": extra })
}

fn random_layout(rng: &mut ChaCha8Rng) -> SupportLayout {
    if rng.random_bool(1.0 / 3.0) {
        SupportLayout::NotAbsolutelyContinuous
    } else {
        SupportLayout::Shared
    }
}

fn sandwich(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(3..=8), rng.random_range(1..=3));
    let layout = random_layout(rng);
    let inst = random_pair(rng, n, d, layout);
    let f = pick(rng, &standard_generators()).clone();
    let lip = *pick(rng, &[0.5, 1.0, 2.0]);
    let gamma = FunctionClassSpec::lipschitz(lip)?;
    let dfg = f_gamma_divergence(&inst.q, &inst.p, &f, &gamma)?.value;
    let df = f_divergence(&inst.q, &inst.p, &f)?;
    let ipm = gamma_ipm(&inst.q, &inst.p, &gamma)?.value;
    let upper = df.min(ipm).to_f64();
    let v = dfg.to_f64();
    Ok(Outcome {
        pass: v.is_finite() && v >= -1e-12 && v <= upper + 1e-8,
        detail: json!({ "dfgamma": dfg, "df": df, "ipm": ipm }),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "lip": lip })),
    })
}

fn divergence_property(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(2..=6), rng.random_range(1..=2));
    let layout = random_layout(rng);
    let inst = random_pair(rng, n, d, layout);
    let f = pick(rng, &standard_generators()).clone();
    let gamma = FunctionClassSpec::lipschitz(1.0)?;
    let apart = f_gamma_divergence(&inst.q, &inst.p, &f, &gamma)?.value.to_f64();
    let same = f_gamma_divergence(&inst.p, &inst.p, &f, &gamma)?.value.to_f64();
    Ok(Outcome {
        pass: apart > 1e-6 && same.abs() <= 1e-9,
        detail: json!({ "q_ne_p": apart, "q_eq_p": same }),
        instance: pair_json(&inst.q, &inst.p, &f, Value::Null),
    })
}

fn infconv(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(3..=8), rng.random_range(1..=3));
    let layout = random_layout(rng);
    let inst = random_pair(rng, n, d, layout);
    let f = pick(rng, &standard_generators()).clone();
    let lip = *pick(rng, &[0.5, 1.0, 2.0]);
    let gamma = FunctionClassSpec::lipschitz(lip)?;
    let dual = f_gamma_divergence(&inst.q, &inst.p, &f, &gamma)?.value.to_f64();
    let primal = infimal_convolution(&inst.q, &inst.p, &f, &gamma)?.value.to_f64();
    let rel = rel_diff(primal, dual);
    Ok(Outcome {
        pass: rel <= 1e-5,
        detail: json!({ "primal": primal, "dual": dual, "relative_difference": rel }),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "lip": lip })),
    })
}

fn is_monotone(vals: &[f64], increasing: bool, slack: f64) -> bool {
    vals.windows(2).all(|w| if increasing { w[1] >= w[0] - slack } else { w[1] <= w[0] + slack })
}

fn limits(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(3..=5), rng.random_range(1..=2));
    let inst = random_pair(rng, n, d, SupportLayout::Shared);
    let f = pick(rng, &standard_generators()).clone();
    let gamma = FunctionClassSpec::lipschitz(1.0)?;
    let df = f_divergence(&inst.q, &inst.p, &f)?.to_f64();
    let w = gamma_ipm(&inst.q, &inst.p, &gamma)?.value.to_f64();
    let large = [1.0, 10.0, 100.0, 1e3, 1e4];
    let small = [1e-1, 1e-2, 1e-3, 1e-4];
    let up: Vec<f64> = limit_scan(&inst.q, &inst.p, &f, &gamma, &large)?
        .into_iter()
        .map(|(_, v)| v.to_f64())
        .collect();
    let down: Vec<f64> = limit_scan(&inst.q, &inst.p, &f, &gamma, &small)?
        .into_iter()
        .map(|(s, v)| v.to_f64() / s)
        .collect();
    let top = *up.last().unwrap_or(&f64::NAN);
    let bottom = *down.last().unwrap_or(&f64::NAN);
    let pass = rel_diff(top, df) <= 1e-3
        && rel_diff(bottom, w) <= 1e-3
        && is_monotone(&up, true, 1e-9)
        && is_monotone(&down, true, 1e-6);
    Ok(Outcome {
        pass,
        detail: json!({ "df": df, "ipm": w, "large_lip": up, "small_lip_ratio": down }),
        instance: pair_json(&inst.q, &inst.p, &f, Value::Null),
    })
}

fn dual(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(2..=5), rng.random_range(1..=2));
    let layout = random_layout(rng);
    let inst = random_pair(rng, n, d, layout);
    let f = pick(rng, &standard_generators()).clone();
    let lip = *pick(rng, &[0.5, 1.0, 2.0]);
    let gamma = FunctionClassSpec::lipschitz(lip)?;
    let js = joint_support(&inst.q, &inst.p)?;
    // A scaled distance function lies in Γ.
    let z = crate::instances::random_point(rng, d);
    let slope = lip * rng.random_range(-0.9..0.9);
    let g: Vec<f64> = js.points.iter().map(|x| slope * crate::measures::euclidean(x, &z)).collect();
    let r = dual_check(&js.points, &js.p, &f, &g, &gamma)?;
    Ok(Outcome {
        pass: (r.lhs - r.rhs).abs() <= 1e-6,
        detail: json!({ "lhs": r.lhs, "rhs": r.rhs, "gap": r.gap }),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "g": g, "gamma": gamma })),
    })
}

/// A kernel from the joint support of `(q, p)` onto 2–4 random targets.
pub fn random_kernel(rng: &mut ChaCha8Rng, q: &DiscreteMeasure, p: &DiscreteMeasure) -> Result<StochasticKernel> {
    let js = joint_support(q, p)?;
    let t = rng.random_range(2..=4);
    let d = q.dim();
    let targets: Vec<Vec<f64>> = (0..t).map(|_| crate::instances::random_point(rng, d)).collect();
    let rows = (0..js.len()).map(|_| random_weights(rng, t)).collect();
    StochasticKernel::new(rows, targets, Some(js.points))
}

fn dpi(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(2..=6), rng.random_range(1..=2));
    let layout = random_layout(rng);
    let inst = random_pair(rng, n, d, layout);
    let f = pick(rng, &standard_generators()).clone();
    let gamma = FunctionClassSpec::lipschitz(*pick(rng, &[0.5, 1.0, 2.0]))?;
    let k = random_kernel(rng, &inst.q, &inst.p)?;
    let r = data_processing_check(&inst.q, &inst.p, &f, &gamma, &k)?;
    Ok(Outcome {
        pass: r.holds,
        detail: json!({ "lhs": r.lhs, "rhs": r.rhs }),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "kernel": k.matrix(), "targets": k.targets() })),
    })
}

fn hessian(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, d) = (rng.random_range(2..=6), rng.random_range(1..=2));
    let inst = random_pair(rng, n, d, SupportLayout::Shared);
    let f = pick(rng, &standard_generators()).clone();
    let len = joint_support(&inst.q, &inst.p)?.len();
    // Small spread keeps every g − ν inside a smooth piece of f*.
    let g0: Vec<f64> = (0..len).map(|_| rng.random_range(0.2..0.8)).collect();
    let psi: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut pass = true;
    let mut details = Vec::new();
    for nu_aware in [true, false] {
        let r = hessian_check(&f, &inst.q, &inst.p, &g0, &psi, nu_aware)?;
        let ok = rel_diff(r.analytic, r.numeric) <= 1e-3 || (r.analytic - r.numeric).abs() <= 1e-9;
        pass &= ok;
        details.push(json!({ "nu_aware": nu_aware, "analytic": r.analytic, "numeric": r.numeric }));
    }
    Ok(Outcome {
        pass,
        detail: Value::Array(details),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "g0": g0, "psi": psi })),
    })
}

fn bias(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let inst = random_pair(rng, 3, 1, SupportLayout::Shared);
    let f = crate::generators::make_alpha(2.0)?;
    let gamma = FunctionClassSpec::lipschitz(1.0)?;
    let seed = rng.random();
    let r = bias_experiment(&inst.q, &inst.p, &f, &gamma, 20, 200, seed)?;
    Ok(Outcome {
        pass: r.upward_bias,
        detail: json!({ "mean": r.mean_estimate, "std_error": r.std_error, "true_value": r.true_value }),
        instance: pair_json(&inst.q, &inst.p, &f, json!({ "seed": seed })),
    })
}

fn penalty(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let d = rng.random_range(1..=3);
    let lip = rng.random_range(0.5..2.0);
    let lambda = rng.random_range(0.1..10.0);
    let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let samples = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..20).map(|_| crate::instances::random_point(rng, d)).collect()
    };
    let (q, p) = (samples(rng), samples(rng));
    let seed = rng.random();
    let linear = |slope: f64| {
        let a: Vec<f64> = dir.iter().map(|v| v * slope / norm).collect();
        FnWithGradient {
            f: {
                let a = a.clone();
                move |x: &[f64]| x.iter().zip(&a).map(|(u, v)| u * v).sum::<f64>()
            },
            grad: move |_: &[f64]| a.clone(),
        }
    };
    let one = PenaltySpec::new(lambda, lip, Sidedness::OneSided, 100)?;
    let two = PenaltySpec::new(lambda, lip, Sidedness::TwoSided, 100)?;
    let inside = gradient_penalty(&linear(rng.random_range(0.0..lip)), &q, &p, &one, seed)?;
    let on_l_two = gradient_penalty(&linear(lip), &q, &p, &two, seed)?;
    let double_one = gradient_penalty(&linear(2.0 * lip), &q, &p, &one, seed)?;
    let double_two = gradient_penalty(&linear(2.0 * lip), &q, &p, &two, seed)?;
    let counter = penalty_counterexample(lambda, 1.0, 601, 2000, seed)?;
    let pass = inside == 0.0
        && on_l_two.abs() <= 1e-10 * lambda
        && rel_diff(double_one, 3.0 * lambda) <= 1e-10
        && rel_diff(double_two, lambda) <= 1e-10
        && counter.one_sided_at_opt == 0.0
        && counter.two_sided_at_opt > 0.2 * lambda * counter.rho_interior
        && counter.grad_norm_max <= 0.5 + counter.grid_step;
    Ok(Outcome {
        pass,
        detail: json!({
            "inside": inside,
            "two_sided_at_lip": on_l_two,
            "one_sided_at_2lip": double_one,
            "two_sided_at_2lip": double_two,
            "counterexample": counter,
        }),
        instance: json!({ "lambda": lambda, "lip": lip, "direction": dir, "seed": seed }),
    })
}

/// Runs `suite` on `n` instances; instance `i` draws from its own stream.
pub fn run_suite(suite: &str, n: usize, seed: u64) -> Result<SuiteReport> {
    let case: fn(&mut ChaCha8Rng) -> Result<Outcome> = match suite {
        "sandwich" => sandwich,
        "divergence-property" => divergence_property,
        "infconv" => infconv,
        "limits" => limits,
        "dual" => dual,
        "dpi" => dpi,
        "hessian" => hessian,
        "bias" => bias,
        "penalty" => penalty,
        _ => return invalid(format!("unknown suite {suite:?}; expected one of {}", SUITES.join(", "))),
    };
    if n == 0 {
        return invalid("need at least one instance");
    }
    let cases: Vec<CaseResult> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            match case(&mut r) {
                Ok(o) => CaseResult {
                    index: i,
                    pass: o.pass,
                    detail: o.detail,
                    instance: (!o.pass).then_some(o.instance),
                },
                // A solver failure on a valid instance counts as a violation.
                Err(e) => CaseResult {
                    index: i,
                    pass: false,
                    detail: json!({ "error": e.to_string() }),
                    instance: None,
                },
            }
        })
        .collect();
    let passed = cases.iter().filter(|c| c.pass).count();
    Ok(SuiteReport {
        suite: suite.to_string(),
        seed,
        instances: n,
        passed,
        failed: n - passed,
        cases,
    })
}

