//! Virtual costs, thresholds, regularity diagnostics and the virtual-cost density.

use serde::{Deserialize, Serialize};

use crate::dist::CostDistribution;
use crate::error::{LeakError, Result};
use crate::market::MarketPoint;
use crate::quad;

/// Inversion tolerance for phi, relative to the support width.
const INVERT_REL_TOL: f64 = 1e-14;

/// Cost below which a share `rate` of the group has lower cost.
pub fn cost_threshold(dist: &CostDistribution, rate: f64) -> f64 {
    dist.quantile(rate)
}

/// phi_i(c) = c - h(c) + (1 - b) F(c)/f(c), i.e. (1 - b)(c + F/f).
pub fn virtual_cost(point: &MarketPoint, i: usize, c: f64) -> Result<f64> {
    let d = point.dist(i);
    let ratio = d.cdf_over_pdf(c)?;
    let b = point.b(i);
    Ok(c - point.h(i, c) + (1.0 - b) * ratio)
}

/// phi_i restricted to the participant interval [c_min, tau_i].
#[derive(Debug, Clone)]
pub struct VirtualCostCurve {
    pub group: usize,
    pub dist: CostDistribution,
    pub b: f64,
    pub tau: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl VirtualCostCurve {
    pub fn new(point: &MarketPoint, i: usize) -> Result<Self> {
        let dist = point.dist(i).clone();
        let tau = point.tau(i);
        let b = point.b(i);
        let phi_min = virtual_cost(point, i, dist.c_min())?;
        let phi_max = virtual_cost(point, i, tau)?;
        if !phi_max.is_finite() {
            return Err(LeakError::Domain(format!("virtual cost is infinite at tau = {tau} in group {i}")));
        }
        Ok(Self { group: i, dist, b, tau, phi_min, phi_max })
    }

    /// phi(c) for c in the support; no domain check beyond the distribution's.
    pub fn eval(&self, c: f64) -> f64 {
        let r = self.dist.cdf_over_pdf(c.clamp(self.dist.c_min(), self.dist.c_max())).unwrap_or(f64::INFINITY);
        (1.0 - self.b) * (c + r)
    }

    /// Central-difference derivative, one-sided at the ends of [c_min, tau].
    pub fn deriv(&self, c: f64) -> f64 {
        let h = 1e-5 * self.dist.width();
        let lo = (c - h).max(self.dist.c_min());
        let hi = (c + h).min(self.tau);
        if hi <= lo {
            return f64::NAN;
        }
        (self.eval(hi) - self.eval(lo)) / (hi - lo)
    }

    /// Cost with phi(c) = x, clamped to [c_min, tau].
    pub fn invert(&self, x: f64) -> f64 {
        let lo = self.dist.c_min();
        if x <= self.phi_min {
            return lo;
        }
        if x >= self.phi_max {
            return self.tau;
        }
        quad::bisect(|c| self.eval(c) - x, lo, self.tau, INVERT_REL_TOL * self.dist.width())
    }

    /// (c, phi) samples for plotting.
    pub fn samples(&self, n: usize) -> Vec<(f64, f64)> {
        let lo = self.dist.c_min();
        (0..n)
            .map(|k| {
                let c = lo + (self.tau - lo) * k as f64 / (n - 1).max(1) as f64;
                (c, self.eval(c))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub group: usize,
    pub passed: bool,
    /// First cost where a check fails, with the check name.
    pub first_violation: Option<(f64, String)>,
}

/// Grid check of the regularity assumption: phi non-decreasing on [c_min, tau] and
/// F f' <= 2 f^2 on the support. Uses 500 cell midpoints so densities that blow up at
/// an endpoint stay finite.
pub fn regularity_check(point: &MarketPoint, i: usize) -> RegularityReport {
    const N: usize = 500;
    let d = point.dist(i);
    let mut first: Option<(f64, String)> = None;
    for k in 0..N {
        let c = d.c_min() + d.width() * (k as f64 + 0.5) / N as f64;
        let (f, fp, big_f) = (d.pdf(c), d.pdf_deriv(c), d.cdf(c));
        if big_f * fp > 2.0 * f * f * (1.0 + 1e-12) {
            first = Some((c, format!("F f' = {:.6e} exceeds 2 f^2 = {:.6e}", big_f * fp, 2.0 * f * f)));
            break;
        }
    }
    if first.is_none() {
        let tau = point.tau(i);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..N {
            let c = d.c_min() + (tau - d.c_min()) * (k as f64 + 0.5) / N as f64;
            match virtual_cost(point, i, c) {
                Ok(phi) if phi >= prev * (1.0 - 1e-12) - 1e-15 || prev == f64::NEG_INFINITY => prev = phi,
                Ok(phi) => {
                    first = Some((c, format!("phi decreases from {prev:.6e} to {phi:.6e}")));
                    break;
                }
                Err(e) => {
                    first = Some((c, e.to_string()));
                    break;
                }
            }
        }
    }
    RegularityReport { group: i, passed: first.is_none(), first_violation: first }
}

/// Distribution of virtual cost over the participating population, mixing groups by mass.
///
/// Integrals against the density are evaluated by changing variables back to cost,
/// which keeps the integrands smooth even where the mixture density jumps.
#[derive(Debug, Clone)]
pub struct VirtualCostDensity {
    pub curves: Vec<VirtualCostCurve>,
    pub masses: Vec<f64>,
    pub phi_min: f64,
    pub phi_max: f64,
    pub rel_tol: f64,
}

impl VirtualCostDensity {
    pub fn new(point: &MarketPoint) -> Result<Self> {
        let mut curves = Vec::with_capacity(point.num_groups());
        for i in 0..point.num_groups() {
            let rep = regularity_check(point, i);
            if let Some((cost, detail)) = rep.first_violation {
                return Err(LeakError::Regularity { group: i, cost, detail });
            }
            curves.push(VirtualCostCurve::new(point, i)?);
        }
        let phi_min = curves.iter().map(|c| c.phi_min).fold(f64::INFINITY, f64::min);
        let phi_max = curves.iter().map(|c| c.phi_max).fold(f64::NEG_INFINITY, f64::max);
        let masses = (0..point.num_groups()).map(|i| point.mass(i)).collect();
        Ok(Self { curves, masses, phi_min, phi_max, rel_tol: quad::DEFAULT_REL_TOL })
    }

    /// Same density with a different quadrature tolerance.
    pub fn with_tolerance(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    /// omega(phi) = sum_i q_i f_i(c_i(phi)) / phi_i'(c_i(phi)).
    pub fn omega(&self, x: f64) -> f64 {
        let mut s = 0.0;
        for (cv, &q) in self.curves.iter().zip(&self.masses) {
            if x >= cv.phi_min && x <= cv.phi_max && cv.phi_max > cv.phi_min {
                let c = cv.invert(x);
                s += q * cv.dist.pdf(c) / cv.deriv(c);
            }
        }
        s
    }

    /// integral of g(phi) omega(phi) over [lo, hi].
    pub fn integrate<G: Fn(f64) -> f64>(&self, g: G, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for (cv, &q) in self.curves.iter().zip(&self.masses) {
            let a = lo.max(cv.phi_min);
            let b = hi.min(cv.phi_max);
            if b <= a {
                continue;
            }
            let ca = cv.invert(a);
            let cb = cv.invert(b);
            total += q * quad::integrate(|c| g(cv.eval(c)) * cv.dist.pdf(c), ca, cb, self.rel_tol);
        }
        total
    }

    /// Total participant mass; equals theta_bar.
    pub fn mass(&self) -> f64 {
        self.integrate(|_| 1.0, self.phi_min, self.phi_max)
    }
}
