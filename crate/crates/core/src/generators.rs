//! Convex generators `f` with `f(1) = 0` and their Legendre transforms.
//!
//! The KL and α families carry closed forms for `f*` and its derivatives.
//! A user-supplied `f` gets a numerical transform: `f*(y)` by concave
//! maximization of `y x - f(x)`, `(f*)'(y)` as the maximizing `x` (envelope
//! theorem), and `(f*)''` by central differences of that maximizer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::extended::ExtReal;
use crate::optim::scalar::golden_section_max;

/// Upper end of the search interval for the numerical Legendre transform.
pub const LEGENDRE_X_MAX: f64 = 1e6;
const LEGENDRE_X_MIN: f64 = 1e-12;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum GeneratorKind {
    /// `x log x` on `(0, ∞)`.
    Kl,
    /// `(x^α − 1) / (α(α − 1))` on `(0, ∞)`.
    Alpha(f64),
    Custom { name: String, f: ScalarFn },
}

impl fmt::Debug for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Kl => write!(f, "Kl"),
            GeneratorKind::Alpha(a) => write!(f, "Alpha({a})"),
            GeneratorKind::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// A convex `f: (a, b) → R` with `f(1) = 0`. Immutable once built.
#[derive(Clone, Debug)]
pub struct ConvexGenerator {
    kind: GeneratorKind,
    a: f64,
    b: f64,
    nu0: f64,
    admissible: bool,
    strictly_admissible: bool,
}

pub fn make_kl() -> ConvexGenerator {
    ConvexGenerator {
        kind: GeneratorKind::Kl,
        a: 0.0,
        b: f64::INFINITY,
        nu0: 1.0,
        admissible: true,
        strictly_admissible: true,
    }
}

pub fn make_alpha(alpha: f64) -> Result<ConvexGenerator> {
    if !(alpha > 0.0) || alpha == 1.0 || !alpha.is_finite() {
        return invalid(format!("alpha must be positive and different from 1, got {alpha}"));
    }
    Ok(ConvexGenerator {
        kind: GeneratorKind::Alpha(alpha),
        a: 0.0,
        b: f64::INFINITY,
        nu0: 1.0 / (alpha - 1.0),
        admissible: alpha > 1.0,
        strictly_admissible: alpha > 1.0,
    })
}

impl ConvexGenerator {
    /// Wraps a user-supplied convex `f` on `(a, b)`.
    ///
    /// Checks `f(1) = 0` and spot-checks convexity on 64 random midpoints;
    /// the admissibility flags are inferred numerically from `f*`.
    pub fn custom(name: impl Into<String>, a: f64, b: f64, f: ScalarFn) -> Result<ConvexGenerator> {
        if !(a < 1.0 && 1.0 < b) {
            return invalid(format!("need a < 1 < b, got a = {a}, b = {b}"));
        }
        if f(1.0).abs() > 1e-12 {
            return invalid(format!("f(1) must be 0, got {}", f(1.0)));
        }
        let lo = if a.is_finite() { a } else { -50.0 };
        let hi = if b.is_finite() { b } else { 50.0 };
        let mut rng = crate::rng::stream(0x5eed_c0de, 0);
        for _ in 0..64 {
            let x = rng.random_range(lo..hi);
            let y = rng.random_range(lo..hi);
            if x <= a || y <= a || x >= b || y >= b {
                continue;
            }
            let mid = f(0.5 * (x + y));
            let chord = 0.5 * (f(x) + f(y));
            if mid > chord + 1e-9 * (1.0 + chord.abs()) {
                return invalid(format!("f is not convex: midpoint of ({x}, {y}) lies above the chord"));
            }
        }
        let h = 1e-6;
        let nu0 = (f(1.0 + h) - f(1.0)) / h;
        let mut g = ConvexGenerator {
            kind: GeneratorKind::Custom { name: name.into(), f },
            a,
            b,
            nu0,
            admissible: false,
            strictly_admissible: false,
        };
        let hi_ok = g.f_star(10.0).is_finite();
        let lo_ok = match (g.f_star(-1e3), g.f_star(-1e4)) {
            (ExtReal::Finite(u), ExtReal::Finite(v)) => v <= u + 1.0,
            _ => false,
        };
        g.admissible = hi_ok && lo_ok;
        let strict = g.f(1.0 + 1e-3) + g.f(1.0 - 1e-3) > 1e-12;
        g.strictly_admissible = g.admissible && strict;
        Ok(g)
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// `f'_+(1)`, the fixed point of `f*`.
    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn admissible(&self) -> bool {
        self.admissible
    }

    pub fn strictly_admissible(&self) -> bool {
        self.strictly_admissible
    }

    pub fn name(&self) -> String {
        match &self.kind {
            GeneratorKind::Kl => "kl".into(),
            GeneratorKind::Alpha(a) => format!("alpha:{a}"),
            GeneratorKind::Custom { name, .. } => name.clone(),
        }
    }

    /// `f(x)`, extended by its limits at finite endpoints and by `+∞` outside `[a, b]`.
    pub fn f(&self, x: f64) -> f64 {
        match &self.kind {
            GeneratorKind::Kl => {
                if x > 0.0 {
                    x * x.ln()
                } else if x == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            GeneratorKind::Alpha(alpha) => {
                if x >= 0.0 {
                    (x.powf(*alpha) - 1.0) / (alpha * (alpha - 1.0))
                } else {
                    f64::INFINITY
                }
            }
            GeneratorKind::Custom { f, .. } => {
                if x > self.a && x < self.b {
                    f(x)
                } else if x == self.a {
                    f(self.a + LEGENDRE_X_MIN.max(self.a.abs() * 1e-12))
                } else if x == self.b {
                    f(self.b - LEGENDRE_X_MIN.max(self.b.abs() * 1e-12))
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `f'(x)` on the open interval.
    pub fn f_prime(&self, x: f64) -> f64 {
        match &self.kind {
            GeneratorKind::Kl => x.ln() + 1.0,
            GeneratorKind::Alpha(alpha) => x.powf(alpha - 1.0) / (alpha - 1.0),
            GeneratorKind::Custom { f, .. } => {
                let h = 1e-6 * (1.0 + x.abs());
                let (lo, hi) = ((x - h).max(self.a + 0.5 * h), (x + h).min(self.b - 0.5 * h));
                (f(hi) - f(lo)) / (hi - lo)
            }
        }
    }

    /// `f''(x)` on the open interval.
    pub fn f_second(&self, x: f64) -> f64 {
        match &self.kind {
            GeneratorKind::Kl => 1.0 / x,
            GeneratorKind::Alpha(alpha) => x.powf(alpha - 2.0),
            GeneratorKind::Custom { f, .. } => {
                let h = 1e-4 * (1.0 + x.abs());
                let h = h.min(0.5 * (x - self.a)).min(0.5 * (self.b - x));
                (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
            }
        }
    }

    /// Legendre transform `f*(y) = sup_{x ∈ (a,b)} {y x − f(x)}`.
    pub fn f_star(&self, y: f64) -> ExtReal {
        match &self.kind {
            GeneratorKind::Kl => ExtReal::from_f64((y - 1.0).exp()),
            GeneratorKind::Alpha(alpha) => {
                let alpha = *alpha;
                if alpha > 1.0 {
                    let base = 1.0 / (alpha * (alpha - 1.0));
                    if y > 0.0 {
                        let e = alpha / (alpha - 1.0);
                        ExtReal::from_f64((alpha - 1.0).powf(e) * y.powf(e) / alpha + base)
                    } else {
                        ExtReal::Finite(base)
                    }
                } else if y >= 0.0 {
                    ExtReal::PosInf
                } else {
                    let e = alpha / (1.0 - alpha);
                    let c = (1.0 - alpha).powf(-e) / alpha;
                    ExtReal::from_f64(c * (-y).powf(-e) - 1.0 / (alpha * (1.0 - alpha)))
                }
            }
            GeneratorKind::Custom { .. } => self.legendre_numeric(y).0,
        }
    }

    /// Right derivative of `f*`; `None` where `f*` is infinite.
    pub fn f_star_prime(&self, y: f64) -> Option<f64> {
        match &self.kind {
            GeneratorKind::Kl => Some((y - 1.0).exp()),
            GeneratorKind::Alpha(alpha) => {
                let alpha = *alpha;
                if alpha > 1.0 {
                    if y > 0.0 {
                        let e = 1.0 / (alpha - 1.0);
                        Some(((alpha - 1.0) * y).powf(e))
                    } else {
                        Some(0.0)
                    }
                } else if y >= 0.0 {
                    None
                } else {
                    Some(((1.0 - alpha) * -y).powf(-1.0 / (1.0 - alpha)))
                }
            }
            GeneratorKind::Custom { .. } => {
                let (v, x) = self.legendre_numeric(y);
                v.is_finite().then_some(x)
            }
        }
    }

    /// Second derivative of `f*` where it exists (right limit at kinks).
    pub fn f_star_second(&self, y: f64) -> Option<f64> {
        match &self.kind {
            GeneratorKind::Kl => Some((y - 1.0).exp()),
            GeneratorKind::Alpha(alpha) => {
                let alpha = *alpha;
                if alpha > 1.0 {
                    if y > 0.0 {
                        let e = 1.0 / (alpha - 1.0);
                        Some((alpha - 1.0).powf(e) * e * y.powf(e - 1.0))
                    } else if y == 0.0 && alpha == 2.0 {
                        Some(1.0)
                    } else {
                        Some(0.0)
                    }
                } else if y >= 0.0 {
                    None
                } else {
                    Some(((1.0 - alpha) * -y).powf(-(2.0 - alpha) / (1.0 - alpha)))
                }
            }
            GeneratorKind::Custom { .. } => {
                let h = 1e-4 * (1.0 + y.abs());
                let up = self.f_star_prime(y + h)?;
                let down = self.f_star_prime(y - h)?;
                Some(((up - down) / (2.0 * h)).max(0.0))
            }
        }
    }

    /// Numerical `f*(y)` together with the maximizing `x`.
    pub fn legendre_numeric(&self, y: f64) -> (ExtReal, f64) {
        let obj = |x: f64| {
            let v = self.f(x);
            if v.is_finite() {
                y * x - v
            } else {
                f64::NEG_INFINITY
            }
        };
        legendre_scalar(obj, self.a, self.b)
    }
}

/// `sup_{x ∈ (lo, hi)} obj(x)` for a concave `obj`, returning the value and
/// the maximizer. Infinite endpoints are replaced by `±X_max`, the bracket is
/// grown geometrically from 1 while the objective keeps increasing, and an
/// objective still increasing at `X_max` is declared unbounded.
pub fn legendre_scalar(obj: impl Fn(f64) -> f64, a: f64, b: f64) -> (ExtReal, f64) {
    let lo_lim = if a.is_finite() { a + LEGENDRE_X_MIN.max(a.abs() * 1e-12) } else { -LEGENDRE_X_MAX };
    let hi_lim = if b.is_finite() { b - LEGENDRE_X_MIN.max(b.abs() * 1e-12) } else { LEGENDRE_X_MAX };
    // Start from a point where the objective is finite.
    let mut anchor = 1.0_f64.clamp(lo_lim, hi_lim);
    if !obj(anchor).is_finite() {
        let found = (0..40)
            .flat_map(|k| {
                let s = 2f64.powi(k - 20);
                [1.0 - s, 1.0 + s, -s, s]
            })
            .map(|x| x.clamp(lo_lim, hi_lim))
            .find(|&x| obj(x).is_finite());
        match found {
            Some(x) => anchor = x,
            None => return (ExtReal::NegInf, anchor),
        }
    }

    // Expand to the right while increasing.
    let hi;
    let mut width = 1.0;
    let mut prev = obj(anchor);
    loop {
        let next = (anchor + width).min(hi_lim);
        let v = obj(next);
        if !(v > prev) || next >= hi_lim {
            hi = next;
            if v > prev && next >= hi_lim && !b.is_finite() {
                // Still climbing at X_max: check the slope to declare divergence.
                let back = obj(hi_lim * 0.5);
                if v > back {
                    return (ExtReal::PosInf, hi_lim);
                }
            }
            break;
        }
        prev = v;
        width *= 2.0;
    }
    // Expand to the left while increasing.
    let lo;
    let mut width = 1.0;
    let mut prev = obj(anchor);
    loop {
        let next = (anchor - width).max(lo_lim);
        let v = obj(next);
        if !(v > prev) || next <= lo_lim {
            lo = next;
            if v > prev && next <= lo_lim && !a.is_finite() {
                let back = obj(lo_lim * 0.5);
                if v > back {
                    return (ExtReal::PosInf, lo_lim);
                }
            }
            break;
        }
        prev = v;
        width *= 2.0;
    }
    let xtol = 1e-11 * (1.0 + lo.abs().max(hi.abs()));
    let (x, v) = golden_section_max(&obj, lo, hi, xtol);
    (ExtReal::from_f64(v), x)
}

/// Parses `kl`, `alpha:<value>`, or `chi2` (the α = 2 member).
impl FromStr for ConvexGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "kl" => Ok(make_kl()),
            "chi2" => make_alpha(2.0),
            _ => match s.strip_prefix("alpha:") {
                Some(v) => {
                    let alpha: f64 = v
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("bad alpha value {v:?}")))?;
                    make_alpha(alpha)
                }
                None => invalid(format!("unknown generator {s:?}; expected kl, alpha:<v>, chi2")),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
    }

    fn family() -> Vec<ConvexGenerator> {
        vec![
            make_kl(),
            make_alpha(2.0).unwrap(),
            make_alpha(5.0).unwrap(),
            make_alpha(1.5).unwrap(),
            make_alpha(0.5).unwrap(),
        ]
    }

    #[test]
    fn kl_examples() {
        let kl = make_kl();
        assert_eq!(kl.f_star(1.0), ExtReal::Finite(1.0));
        assert_eq!(kl.f(1.0), 0.0);
        assert!((kl.f_star(0.0).to_f64() - (-1f64).exp()).abs() < 1e-15);
        assert!(kl.strictly_admissible());
        assert_eq!(kl.nu0(), 1.0);
    }

    #[test]
    fn alpha_examples() {
        let f2 = make_alpha(2.0).unwrap();
        for y in [0.1, 1.0, 2.5] {
            assert!((f2.f_star(y).to_f64() - (y * y / 2.0 + 0.5)).abs() < 1e-14);
        }
        assert_eq!(f2.f(1.0), 0.0);
        assert!(f2.strictly_admissible());
        let half = make_alpha(0.5).unwrap();
        assert!(!half.admissible());
        assert_eq!(half.f_star(0.0), ExtReal::PosInf);
    }

    #[test]
    fn alpha_rejects_bad_values() {
        assert!(make_alpha(1.0).is_err());
        assert!(make_alpha(0.0).is_err());
        assert!(make_alpha(-2.0).is_err());
    }

    #[test]
    fn legendre_examples() {
        let f2 = make_alpha(2.0).unwrap();
        // Brute force: max over a fine grid of 2x - (x²-1)/2.
        let brute = grid(0.0, 10.0, 1_000_001)
            .map(|x| 2.0 * x - (x * x - 1.0) / 2.0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((brute - 2.5).abs() < 1e-9);
        assert!((f2.legendre_numeric(2.0).0.to_f64() - 2.5).abs() < 1e-10);
        for g in family() {
            let nu0 = g.nu0();
            assert!((g.f_star(nu0).to_f64() - nu0).abs() < 1e-12, "{}", g.name());
            assert!((g.legendre_numeric(nu0).0.to_f64() - nu0).abs() < 1e-9, "{}", g.name());
        }
    }

    #[test]
    fn numeric_legendre_matches_closed_forms() {
        for g in family() {
            for y in grid(-5.0, 5.0, 100) {
                let exact = g.f_star(y);
                let numeric = g.legendre_numeric(y).0;
                match exact {
                    ExtReal::Finite(v) => {
                        let got = numeric.to_f64();
                        assert!((got - v).abs() < 1e-8, "{} y={y}: {got} vs {v}", g.name());
                    }
                    _ => assert!(numeric.is_pos_inf(), "{} y={y}: expected +inf, got {numeric}", g.name()),
                }
            }
        }
    }

    #[test]
    fn biconjugate_recovers_f() {
        for g in family() {
            for x in grid(0.2, 4.0, 25) {
                let (v, _) = legendre_scalar(
                    |y| match g.f_star(y) {
                        ExtReal::Finite(s) => x * y - s,
                        _ => f64::NEG_INFINITY,
                    },
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                );
                assert!((v.to_f64() - g.f(x)).abs() < 1e-6, "{} x={x}", g.name());
            }
        }
    }

    #[test]
    fn f_star_prime_matches_finite_differences() {
        for g in family() {
            for y in grid(-3.0, 3.0, 61) {
                // f* of the alpha family is only Hölder-smooth at 0.
                if y.abs() < 0.05 {
                    continue;
                }
                let h = 1e-6;
                let (Some(d), ExtReal::Finite(up), ExtReal::Finite(dn)) =
                    (g.f_star_prime(y), g.f_star(y + h), g.f_star(y - h))
                else {
                    continue;
                };
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - d).abs() < 1e-5 * (1.0 + d.abs()), "{} y={y}: {fd} vs {d}", g.name());
            }
        }
    }

    #[test]
    fn f_star_second_matches_finite_differences() {
        for g in family() {
            for y in grid(-3.0, 3.0, 61) {
                if y.abs() < 0.05 {
                    continue;
                }
                let h = 1e-5;
                let (Some(d2), Some(up), Some(dn)) =
                    (g.f_star_second(y), g.f_star_prime(y + h), g.f_star_prime(y - h))
                else {
                    continue;
                };
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - d2).abs() < 1e-4 * (1.0 + d2.abs()), "{} y={y}", g.name());
            }
        }
    }

    #[test]
    fn f_star_dominates_identity_and_is_monotone() {
        for g in family() {
            let mut prev = ExtReal::NegInf;
            for y in grid(-5.0, 5.0, 201) {
                let v = g.f_star(y);
                assert!(v >= ExtReal::Finite(y), "{} y={y}", g.name());
                assert!(v >= prev, "{} not nondecreasing at {y}", g.name());
                prev = v;
            }
        }
    }

    #[test]
    fn custom_generator_matches_builtin() {
        let custom = ConvexGenerator::custom("xlogx", 0.0, f64::INFINITY, Arc::new(|x: f64| x * x.ln())).unwrap();
        assert!(custom.admissible());
        assert!(custom.strictly_admissible());
        assert!((custom.nu0() - 1.0).abs() < 1e-5);
        for y in [-2.0, 0.0, 1.0, 2.0] {
            assert!((custom.f_star(y).to_f64() - (y - 1.0).exp()).abs() < 1e-8);
            assert!((custom.f_star_prime(y).unwrap() - (y - 1.0).exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn custom_generator_checks() {
        assert!(ConvexGenerator::custom("bad", 0.0, f64::INFINITY, Arc::new(|x: f64| x - 0.5)).is_err());
        assert!(ConvexGenerator::custom("concave", 0.0, 10.0, Arc::new(|x: f64| -(x - 1.0) * (x - 1.0))).is_err());
        // Total variation generator: f* = +inf beyond 1/2, so not admissible.
        let tv = ConvexGenerator::custom("tv", 0.0, f64::INFINITY, Arc::new(|x: f64| 0.5 * (x - 1.0).abs())).unwrap();
        assert!(!tv.admissible());
        assert!(tv.f_star(2.0).is_pos_inf());
    }

    #[test]
    fn parse_names() {
        assert!(matches!("kl".parse::<ConvexGenerator>().unwrap().kind(), GeneratorKind::Kl));
        assert!(matches!("chi2".parse::<ConvexGenerator>().unwrap().kind(), GeneratorKind::Alpha(a) if *a == 2.0));
        assert!(matches!("alpha:5".parse::<ConvexGenerator>().unwrap().kind(), GeneratorKind::Alpha(a) if *a == 5.0));
        assert!("alpha:1".parse::<ConvexGenerator>().is_err());
        assert!("js".parse::<ConvexGenerator>().is_err());
    }
}
