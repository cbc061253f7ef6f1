//! Composite Gauss-Legendre quadrature and bracketing root finders.

use std::sync::OnceLock;

/// Number of Gauss-Legendre nodes per panel.
pub const NODES: usize = 64;

/// Default relative tolerance between successive refinements.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

const MAX_DEPTH: u32 = 48;

struct Rule {
    x: [f64; NODES],
    w: [f64; NODES],
}

fn rule() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = NODES;
        let mut x = [0.0; NODES];
        let mut w = [0.0; NODES];
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            if d != 0.0 {
                dp = d;
            }
            let wi = 2.0 / ((1.0 - z * z) * dp * dp);
            x[i] = -z;
            x[n - 1 - i] = z;
            w[i] = wi;
            w[n - 1 - i] = wi;
        }
        Rule { x, w }
    })
}

/// Legendre polynomial P_n(z) and its derivative by the three-term recurrence.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Single 64-node panel on [a, b].
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let r = rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut s = 0.0;
    for k in 0..NODES {
        s += r.w[k] * f(mid + half * r.x[k]);
    }
    s * half
}

/// Adaptive composite Gauss-Legendre on [a, b].
///
/// A panel is accepted once the one-panel and two-panel estimates agree to
/// `rel_tol` relative (with an absolute floor scaled by the panel width).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if a > b {
        return -integrate(f, b, a, rel_tol);
    }
    let whole = gauss_legendre(&f, a, b);
    refine(&f, a, b, whole, rel_tol, 0)
}

fn refine<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, rel_tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = gauss_legendre(f, a, m);
    let right = gauss_legendre(f, m, b);
    let two = left + right;
    let floor = 1e-300_f64.max(1e-15 * (b - a));
    // Panels narrower than ~1e-10 relative come close to putting nodes on the endpoints in floating point.
    let tiny = b - a <= 1e-10 * (a.abs() + b.abs()).max(1e-300);
    if (two - whole).abs() <= (rel_tol * two.abs()).max(floor) || depth >= MAX_DEPTH || tiny {
        return two;
    }
    refine(f, a, m, left, rel_tol, depth + 1) + refine(f, m, b, right, rel_tol, depth + 1)
}

/// Integrate over [a, b] with forced breakpoints (kinks or jumps of the integrand).
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], rel_tol: f64) -> f64 {
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    pts.sort_by(|x, y| x.total_cmp(y));
    let mut total = 0.0;
    let mut lo = a;
    for &p in pts.iter().chain(std::iter::once(&b)) {
        total += integrate(&f, lo, p, rel_tol);
        lo = p;
    }
    total
}

/// Bisection for a sign change of `g` on [lo, hi].
///
/// `g(lo)` and `g(hi)` must have opposite signs (zero counts as either). Runs until the
/// bracket is narrower than `tol` or stops shrinking in floating point.
/// Returns the midpoint of the final bracket.
pub fn bisect<G: FnMut(f64) -> f64>(mut g: G, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let glo = g(lo);
    if glo == 0.0 {
        return lo;
    }
    let ghi = g(hi);
    if ghi == 0.0 {
        return hi;
    }
    let lo_neg = glo < 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if (gm < 0.0) == lo_neg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bisection in log space for positive brackets spanning many decades.
pub fn bisect_log<G: FnMut(f64) -> f64>(mut g: G, lo: f64, hi: f64, rel_tol: f64) -> f64 {
    let x = bisect(|u| g(u.exp()), lo.ln(), hi.ln(), rel_tol);
    x.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_sum_to_two() {
        let r = rule();
        let s: f64 = r.w.iter().sum();
        assert_relative_eq!(s, 2.0, epsilon = 1e-14);
        for k in 1..NODES {
            assert!(r.x[k] > r.x[k - 1]);
        }
    }

    #[test]
    fn polynomials_are_exact() {
        // degree 127 is the exactness limit; check a few lower degrees
        for deg in [0, 1, 5, 30, 100] {
            let v = gauss_legendre(&|x: f64| x.powi(deg), 0.0, 1.0);
            assert_relative_eq!(v, 1.0 / (deg as f64 + 1.0), epsilon = 1e-13);
        }
    }

    #[test]
    fn endpoint_singularity_converges() {
        let v = integrate(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10);
        assert_relative_eq!(v, 2.0, epsilon = 1e-7);
    }

    #[test]
    fn breaks_handle_jumps() {
        let v = integrate_with_breaks(|x: f64| if x < 0.3 { 1.0 } else { 2.0 }, 0.0, 1.0, &[0.3], 1e-12);
        assert_relative_eq!(v, 0.3 + 1.4, epsilon = 1e-13);
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14);
        assert_relative_eq!(r, 2f64.sqrt(), epsilon = 1e-13);
        let r = bisect(|x| 2.0 - x * x, 0.0, 2.0, 1e-14);
        assert_relative_eq!(r, 2f64.sqrt(), epsilon = 1e-13);
        let r = bisect_log(|x| x.ln() - 10.0, 1e-16, 1e16, 1e-14);
        assert_relative_eq!(r, 10f64.exp(), max_relative = 1e-12);
    }
}
