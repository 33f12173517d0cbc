//! Solver outputs against independent oracles: closed forms, brute-force
//! grids and certificates recomputed from returned witnesses.

use fgamma::instances::{random_pair, standard_generators, SupportLayout};
use fgamma::solvers::{dirac_example, dirac_measures, dual_check};
use fgamma::*;
use rand::Rng;

fn lip(l: f64) -> FunctionClassSpec {
    FunctionClassSpec::lipschitz(l).unwrap()
}

/// Golden-section minimum of a convex function on `[lo, hi]`.
fn golden_min(h: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if h(a) <= h(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    h(0.5 * (lo + hi))
}

/// `f₂*(y) = y²/2 + 1/2` for `y > 0`, else `1/2`.
fn f2_star(y: f64) -> f64 {
    if y > 0.0 {
        0.5 * y * y + 0.5
    } else {
        0.5
    }
}

fn f2_lambda(p: &[f64], g: &[f64]) -> f64 {
    golden_min(
        |nu| nu + p.iter().zip(g).map(|(w, v)| w * f2_star(v - nu)).sum::<f64>(),
        -10.0,
        10.0,
    )
}

#[test]
fn dirac_example_matches_brute_force_grid() {
    // g = (0, g₂, g₃) with |g₂| ≤ x₂ and |g₃ − g₂| ≤ x₃ − x₂.
    for (x2, x3) in [(0.3, 0.6), (1.0, 2.0), (2.0, 3.0)] {
        let steps = 20_000;
        let mut best = f64::NEG_INFINITY;
        for k in 0..=steps {
            let g2 = -x2 + 2.0 * x2 * k as f64 / steps as f64;
            let lam = f2_lambda(&[0.5, 0.5], &[0.0, g2]);
            for m in 0..=20 {
                let g3 = g2 - (x3 - x2) + 2.0 * (x3 - x2) * m as f64 / 20.0;
                best = best.max((g2 + g3) / 3.0 - lam);
            }
        }
        let s = dirac_example(x2, x3, 2.0).unwrap();
        assert!((s.divergence_value - best).abs() < 1e-4, "{x2}: {} vs {best}", s.divergence_value);
        let (q, p) = dirac_measures(x2, x3).unwrap();
        let generic = f_gamma_divergence(&q, &p, &make_alpha(2.0).unwrap(), &lip(1.0)).unwrap();
        assert!((generic.value.to_f64() - best).abs() < 1e-4);
    }
}

#[test]
fn dirac_transition_for_chi_squared() {
    // η(x₂) = ½ (f₂*)'(g₂ − ν) reaches 2/3 at g₂ = 2/3.
    let s = dirac_example(1.0, 2.0, 2.0).unwrap();
    assert!((s.transition - 2.0 / 3.0).abs() < 1e-9);
    assert!((s.eta_x2_mass - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn wasserstein_on_the_line_is_cdf_area() {
    let mut rng = rng::stream(5, 0);
    for _ in 0..20 {
        let n = rng.random_range(2..7);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let inst_q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let inst_p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let q = DiscreteMeasure::normalized(xs.iter().map(|&x| vec![x]).collect(), inst_q).unwrap();
        let p = DiscreteMeasure::normalized(xs.iter().map(|&x| vec![x]).collect(), inst_p).unwrap();
        // W₁ = ∫ |F_Q − F_P| over the sorted support.
        let mut pts: Vec<f64> = xs.clone();
        pts.sort_by(f64::total_cmp);
        let cdf = |m: &DiscreteMeasure, t: f64| -> f64 {
            m.points().iter().zip(m.weights()).filter(|(x, _)| x[0] <= t).map(|(_, w)| w).sum()
        };
        let w1: f64 = pts.windows(2).map(|w| (cdf(&q, w[0]) - cdf(&p, w[0])).abs() * (w[1] - w[0])).sum();
        for l in [0.5, 2.0] {
            let v = gamma_ipm(&q, &p, &lip(l)).unwrap().value.to_f64();
            assert!((v - l * w1).abs() < 1e-9, "{v} vs {}", l * w1);
        }
    }
}

#[test]
fn classical_divergences_in_closed_form() {
    let q = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0], &[0.5, 0.3, 0.2]).unwrap();
    let p = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0], &[0.2, 0.3, 0.5]).unwrap();
    let kl: f64 = [(0.5f64, 0.2f64), (0.3, 0.3), (0.2, 0.5)].iter().map(|(a, b)| a * (a / b).ln()).sum();
    assert!((f_divergence(&q, &p, &make_kl()).unwrap().to_f64() - kl).abs() < 1e-14);
    // f₂: E_P[(r² − 1)/2] = (χ²)/2.
    let chi: f64 = [(0.5, 0.2), (0.3, 0.3), (0.2, 0.5)].iter().map(|(a, b)| (a - b) * (a - b) / b).sum();
    assert!((f_divergence(&q, &p, &make_alpha(2.0).unwrap()).unwrap().to_f64() - chi / 2.0).abs() < 1e-14);
}

#[test]
fn diracs_separated_by_t() {
    for t in [0.5, 2.0] {
        let q = DiscreteMeasure::dirac(vec![t]).unwrap();
        let p = DiscreteMeasure::dirac(vec![0.0]).unwrap();
        assert!((gamma_ipm(&q, &p, &lip(1.0)).unwrap().value.to_f64() - t).abs() < 1e-9);
        for f in standard_generators() {
            let v = f_gamma_divergence(&q, &p, &f, &lip(1.0)).unwrap().value.to_f64();
            assert!((v - t).abs() < 1e-6, "{}: {v}", f.name());
        }
    }
}

#[test]
fn kl_lambda_is_log_sum_exp() {
    let mut rng = rng::stream(8, 0);
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let direct = p.iter().zip(&g).map(|(a, b)| a * b.exp()).sum::<f64>().ln();
        let lam = functionals::lambda_f_weights(&make_kl(), &p, &g).unwrap().value.to_f64();
        assert!((lam - direct).abs() < 1e-10);
    }
}

#[test]
fn f2_lambda_matches_golden_section() {
    let mut rng = rng::stream(9, 0);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lam = functionals::lambda_f_weights(&make_alpha(2.0).unwrap(), &p, &g).unwrap().value.to_f64();
        assert!((lam - f2_lambda(&p, &g)).abs() < 1e-9);
    }
}

#[test]
fn dual_formula_against_simplex_grid() {
    let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
    let p = [0.3, 0.5, 0.2];
    let f = make_alpha(2.0).unwrap();
    let g = [0.0, 0.6, 0.9];
    let gamma = lip(1.0);
    let pm = DiscreteMeasure::probability(pts.clone(), p.to_vec()).unwrap();
    let lam = f2_lambda(&p, &g);
    let steps = 25;
    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let kept: Vec<(Vec<f64>, f64)> =
                pts.iter().cloned().zip(w).filter(|(_, v)| *v > 0.0).collect();
            let q = DiscreteMeasure::probability(kept.iter().map(|k| k.0.clone()).collect(), kept.iter().map(|k| k.1).collect())
                .unwrap();
            let d = f_gamma_divergence(&q, &pm, &f, &gamma).unwrap().value.to_f64();
            grid_best = grid_best.max(w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() - d);
        }
    }
    // The grid is a lower bound that approaches Λ.
    assert!(grid_best <= lam + 1e-8 && grid_best >= lam - 5e-3, "{grid_best} vs {lam}");
    let r = dual_check(&pts, &p, &f, &g, &gamma).unwrap();
    assert!((r.lhs - lam).abs() < 1e-6 && (r.rhs - lam).abs() < 1e-9);
}

fn expectation_on(support: &[Vec<f64>], g: &[f64], m: &DiscreteMeasure) -> f64 {
    m.points()
        .iter()
        .zip(m.weights())
        .map(|(x, w)| {
            let k = support.iter().position(|y| y == x).expect("point on the joint support");
            w * g[k]
        })
        .sum()
}

#[test]
fn witness_certificates() {
    let mut rng = rng::stream(21, 0);
    for k in 0..30 {
        let layout = if k % 3 == 0 { SupportLayout::NotAbsolutelyContinuous } else { SupportLayout::Shared };
        let (n, d) = (rng.random_range(3..7), rng.random_range(1..3));
        let inst = random_pair(&mut rng, n, d, layout);
        let f = standard_generators()[k % 3].clone();
        let gamma = lip([0.5, 1.0, 2.0][k % 3]);

        // Primal witness: D_f(η‖P) + W(Q, η) reproduces the value.
        let ic = infimal_convolution(&inst.q, &inst.p, &f, &gamma).unwrap();
        let eta = ic.eta_star.clone().unwrap();
        let recon = f_divergence(&eta, &inst.p, &f).unwrap().to_f64() + gamma_ipm(&inst.q, &eta, &gamma).unwrap().value.to_f64();
        assert!((recon - ic.value.to_f64()).abs() < 1e-6, "{recon} vs {}", ic.value);

        // Dual witness: normalization of the Gibbs density and the transport identity.
        let s = f_gamma_divergence(&inst.q, &inst.p, &f, &gamma).unwrap();
        let (g, nu) = (s.g_star.clone().unwrap(), s.nu_star.unwrap());
        let js = joint_support(&inst.q, &inst.p).unwrap();
        let mass: f64 = js.p.iter().zip(&g).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * f.f_star_prime(v - nu).unwrap()).sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        let eta = s.eta_star.clone().unwrap();
        let w = gamma_ipm(&inst.q, &eta, &gamma).unwrap().value.to_f64();
        let gap = expectation_on(&s.support, &g, &inst.q) - expectation_on(&s.support, &g, &eta);
        assert!((w - gap).abs() < 1e-6, "{w} vs {gap}");
    }
}

#[test]
fn joint_convexity() {
    let mut rng = rng::stream(22, 0);
    for k in 0..20 {
        let a = random_pair(&mut rng, 4, 1, SupportLayout::Shared);
        // Same support so the mixtures stay on it.
        let pts = a.q.points().to_vec();
        let w = |rng: &mut rand_chacha::ChaCha8Rng| fgamma::instances::random_weights(rng, pts.len());
        let q1 = DiscreteMeasure::probability(pts.clone(), w(&mut rng)).unwrap();
        let p1 = DiscreteMeasure::probability(pts.clone(), w(&mut rng)).unwrap();
        let q0 = DiscreteMeasure::probability(pts.clone(), a.q.weights().to_vec()).unwrap();
        let p0 = DiscreteMeasure::probability(pts.clone(), w(&mut rng)).unwrap();
        let mix = |x: &DiscreteMeasure, y: &DiscreteMeasure| {
            let ws = pts.iter().map(|pt| 0.5 * x.weight_at(pt) + 0.5 * y.weight_at(pt)).collect();
            DiscreteMeasure::probability(pts.clone(), ws).unwrap()
        };
        let f = standard_generators()[k % 3].clone();
        let d = |q: &DiscreteMeasure, p: &DiscreteMeasure| f_gamma_divergence(q, p, &f, &lip(1.0)).unwrap().value.to_f64();
        let mid = d(&mix(&q0, &q1), &mix(&p0, &p1));
        assert!(mid <= 0.5 * d(&q0, &p0) + 0.5 * d(&q1, &p1) + 1e-8);
    }
}

#[test]
fn large_box_recovers_f_divergence() {
    let mut rng = rng::stream(23, 0);
    for k in 0..15 {
        let n = rng.random_range(2..6);
        let inst = random_pair(&mut rng, n, 1, SupportLayout::Shared);
        let f = standard_generators()[k % 3].clone();
        let df = f_divergence(&inst.q, &inst.p, &f).unwrap().to_f64();
        let v = f_gamma_divergence(&inst.q, &inst.p, &f, &FunctionClassSpec::AllBounded { bound: 50.0 })
            .unwrap()
            .value
            .to_f64();
        assert!((v - df).abs() < 1e-6, "{v} vs {df}");
    }
}
