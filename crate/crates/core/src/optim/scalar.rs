//! One-dimensional solvers.

/// Root of a nondecreasing function `h` on `[lo, hi]` with `h(lo) <= 0 <= h(hi)`.
///
/// `h` may return `-inf` / `+inf` to mark points that lie left / right of any
/// root. Runs until the bracket stops shrinking in floating point.
pub fn bisect_nondecreasing(mut h: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = h(mid);
        if v.is_nan() {
            // Treat an undefined derivative as "outside the domain on the left".
            lo = mid;
        } else if v < 0.0 {
            lo = mid;
        } else if v > 0.0 {
            hi = mid;
        } else {
            return mid;
        }
    }
    0.5 * (lo + hi)
}

/// Grow `[center - w, center + w]` geometrically until `h(lo) <= 0 <= h(hi)`
/// for a nondecreasing `h`. Returns `None` when no sign change shows up
/// before the width exceeds `max_width`.
pub fn bracket_nondecreasing(
    mut h: impl FnMut(f64) -> f64,
    lo0: f64,
    hi0: f64,
    max_width: f64,
) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (lo0, hi0);
    let mut step = (hi - lo).max(1.0);
    loop {
        let hl = h(lo);
        let hh = h(hi);
        let lo_ok = hl <= 0.0 || hl.is_nan();
        let hi_ok = hh >= 0.0;
        if lo_ok && hi_ok {
            return Some((lo, hi));
        }
        if hi - lo > max_width {
            return None;
        }
        if !lo_ok {
            lo -= step;
        }
        if !hi_ok {
            hi += step;
        }
        step *= 2.0;
    }
}

/// Maximizer of a unimodal function on `[lo, hi]` by golden-section search,
/// stopping when the bracket is narrower than `xtol`.
pub fn golden_section_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, xtol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iter = 0;
    while (b - a) > xtol && iter < 500 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iter += 1;
    }
    // The endpoints themselves are candidates: a concave objective can peak there.
    let mut best = if fc >= fd { (c, fc) } else { (d, fd) };
    for x in [lo, hi] {
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_finds_cube_root() {
        let r = bisect_nondecreasing(|x| x * x * x - 2.0, 0.0, 2.0);
        assert!((r - 2f64.cbrt()).abs() < 1e-14);
    }

    #[test]
    fn bisection_respects_infinite_markers() {
        // Undefined for x < 1, root at 3.
        let h = |x: f64| if x < 1.0 { f64::NEG_INFINITY } else { x - 3.0 };
        assert!((bisect_nondecreasing(h, -10.0, 10.0) - 3.0).abs() < 1e-13);
    }

    #[test]
    fn bracket_expands_until_sign_change() {
        let (lo, hi) = bracket_nondecreasing(|x| x - 100.0, -1.0, 1.0, 1e9).unwrap();
        assert!(lo <= 100.0 && hi >= 100.0);
        assert!(bracket_nondecreasing(|_| -1.0, -1.0, 1.0, 1e3).is_none());
    }

    #[test]
    fn golden_section_on_parabola() {
        let (x, v) = golden_section_max(|x| -(x - 0.3) * (x - 0.3) + 1.0, -2.0, 5.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn golden_section_boundary_maximum() {
        let (x, _) = golden_section_max(|x| -x, 1.0, 4.0, 1e-12);
        assert_eq!(x, 1.0);
    }
}
