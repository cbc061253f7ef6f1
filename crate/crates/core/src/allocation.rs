//! Optimal allocation rule for a fixed participation profile.

use serde::{Deserialize, Serialize};

use crate::error::{LeakError, Result};
use crate::market::MarketPoint;
use crate::quad;
use crate::virtual_cost::VirtualCostDensity;

/// Tolerance of the knee bisections, in virtual-cost units.
const KNEE_TOL: f64 = 1e-13;

/// The per-capita budget left after participation incentives, l(theta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetResidual {
    pub value: f64,
    /// q_i theta_i (h(tau_i) - g(tau_i) - w(theta_bar)) per group.
    pub addends: Vec<f64>,
    /// B/s - l.
    pub gap: f64,
}

impl BudgetResidual {
    pub fn feasible(&self) -> bool {
        self.gap > 0.0
    }
}

/// Residual l without the feasibility check.
pub fn budget_residual_unchecked(point: &MarketPoint) -> BudgetResidual {
    let w = point.benefit();
    let addends: Vec<f64> =
        (0..point.num_groups()).map(|i| point.mass(i) * point.rate(i) * (point.threshold_gap(i) - w)).collect();
    let value = addends.iter().sum();
    BudgetResidual { value, addends, gap: point.config.budget_per_capita() - value }
}

/// Residual l, erroring when the budget cannot cover it.
pub fn budget_residual(point: &MarketPoint) -> Result<BudgetResidual> {
    let r = budget_residual_unchecked(point);
    if r.feasible() {
        Ok(r)
    } else {
        Err(LeakError::Infeasible { gap: r.gap })
    }
}

/// Q_c(x) = int_{phi_min}^x phi omega + sqrt(x) int_x^{phi_max} sqrt(phi) omega.
pub fn q_c(x: f64, dens: &VirtualCostDensity) -> f64 {
    let x = x.clamp(dens.phi_min, dens.phi_max);
    dens.integrate(|p| p, dens.phi_min, x) + x.sqrt() * dens.integrate(f64::sqrt, x, dens.phi_max)
}

/// R_c(x) = 2 gamma (int_{phi_min}^x phi omega / x + int_x^{phi_max} omega) + theta^2 (1-theta)(1-gamma) s.
pub fn r_c(x: f64, dens: &VirtualCostDensity, gamma: f64, theta_bar: f64, s: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(LeakError::Domain("R_c needs x > 0".into()));
    }
    let x = x.clamp(dens.phi_min, dens.phi_max);
    let head = dens.integrate(|p| p, dens.phi_min, x) / x;
    let tail = dens.integrate(|_| 1.0, x, dens.phi_max);
    Ok(2.0 * gamma * (head + tail) + theta_bar * theta_bar * (1.0 - theta_bar) * (1.0 - gamma) * s)
}

/// True in the strict-truthfulness (low budget) regime:
/// (B/s - l)(2 gamma + theta(1-theta)(1-gamma)s) < gamma sqrt(phi_min) sum_i q_i int sqrt(phi_i) f_i.
pub fn check_low_budget(point: &MarketPoint, dens: &VirtualCostDensity) -> Result<bool> {
    let l = budget_residual(point)?;
    let (gamma, th, s) = (point.config.gamma, point.theta_bar(), point.config.population_size as f64);
    let lhs = l.gap * (2.0 * gamma + th * (1.0 - th) * (1.0 - gamma) * s);
    let rhs = gamma * dens.phi_min.sqrt() * dens.integrate(f64::sqrt, dens.phi_min, dens.phi_max);
    Ok(lhs < rhs)
}

/// Open interval of total budgets B for which the profile is feasible and in the
/// low-budget regime. The virtual-cost density does not depend on B, so the bounds are
/// explicit.
pub fn low_budget_interval(point: &MarketPoint, dens: &VirtualCostDensity) -> (f64, f64) {
    let l = budget_residual_unchecked(point).value;
    let (gamma, th, s) = (point.config.gamma, point.theta_bar(), point.config.population_size as f64);
    let rhs = gamma * dens.phi_min.sqrt() * dens.integrate(f64::sqrt, dens.phi_min, dens.phi_max);
    let width = rhs / (2.0 * gamma + th * (1.0 - th) * (1.0 - gamma) * s);
    (s * l.max(0.0), s * (l + width))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    /// Strictly decreasing, proportional to 1/sqrt(phi).
    #[serde(rename = "SD")]
    StrictlyDecreasing,
    /// Plateau at chi up to the knee, then proportional to 1/sqrt(phi).
    #[serde(rename = "FtD")]
    FixedThenDecreasing,
    #[serde(rename = "FLAT")]
    Flat,
}

/// Which branch of the case analysis produced the rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2a")]
    TwoA,
    #[serde(rename = "2b")]
    TwoB,
    #[serde(rename = "3")]
    Three,
    /// Built by hand rather than by the solver.
    #[serde(rename = "custom")]
    Custom,
}

/// Allocation rule A_i(c) expressed through the virtual cost.
///
/// On participants, `A = chi` when `phi <= phi_hat` and `eta / sqrt(phi)` above it.
/// SD rules have `chi = 0` and `phi_hat` below every virtual cost; FLAT rules put
/// `phi_hat` at the top. Non-participants get `epsilon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationRule {
    pub structure: Structure,
    pub case: CaseTag,
    pub chi: f64,
    pub phi_hat: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub point: MarketPoint,
    /// Group-wise (b_i) copies for evaluating phi without the density.
    #[serde(skip)]
    curves: Vec<crate::virtual_cost::VirtualCostCurve>,
}

impl AllocationRule {
    fn build(
        point: &MarketPoint,
        structure: Structure,
        case: CaseTag,
        chi: f64,
        phi_hat: f64,
        eta: f64,
    ) -> Result<Self> {
        let curves =
            (0..point.num_groups()).map(|i| crate::virtual_cost::VirtualCostCurve::new(point, i)).collect::<Result<_>>()?;
        Ok(Self { structure, case, chi, phi_hat, eta, epsilon: point.config.epsilon, point: point.clone(), curves })
    }

    /// A constant allocation `a` on participants.
    pub fn constant(point: &MarketPoint, a: f64) -> Result<Self> {
        Self::build(point, Structure::Flat, CaseTag::Custom, a, f64::INFINITY, 0.0)
    }

    /// Rebuilds the evaluation cache after deserialization.
    pub fn rehydrate(mut self) -> Result<Self> {
        self.curves = (0..self.point.num_groups())
            .map(|i| crate::virtual_cost::VirtualCostCurve::new(&self.point, i))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Allocation as a function of virtual cost.
    pub fn of_phi(&self, phi: f64) -> f64 {
        if phi <= self.phi_hat {
            self.chi
        } else {
            (self.eta / phi.sqrt()).min(1.0)
        }
    }

    pub fn phi(&self, i: usize, c: f64) -> f64 {
        self.curves[i].eval(c)
    }

    /// A_i(c) on the whole support.
    pub fn eval(&self, i: usize, c: f64) -> f64 {
        if c > self.point.tau(i) {
            self.epsilon
        } else {
            self.of_phi(self.curves[i].eval(c))
        }
    }

    /// Cost at which group i crosses the knee, if it lies inside (c_min, tau_i).
    pub fn knee_cost(&self, i: usize) -> Option<f64> {
        let cv = &self.curves[i];
        (self.phi_hat > cv.phi_min && self.phi_hat < cv.phi_max).then(|| cv.invert(self.phi_hat))
    }

    /// Largest participant cost at which A_i still sits on the constant part, if any.
    pub fn plateau_end(&self, i: usize) -> Option<f64> {
        let cv = &self.curves[i];
        match self.structure {
            Structure::Flat => Some(self.point.tau(i)),
            Structure::StrictlyDecreasing => None,
            Structure::FixedThenDecreasing if self.phi_hat >= cv.phi_max => Some(self.point.tau(i)),
            Structure::FixedThenDecreasing => self.knee_cost(i),
        }
    }

    /// Costs where A_i has a kink or a jump.
    pub fn breakpoints(&self, i: usize) -> Vec<f64> {
        let mut v = vec![self.point.tau(i)];
        v.extend(self.knee_cost(i));
        v
    }

    /// int_a^b A_i(z) dz.
    pub fn integral(&self, i: usize, a: f64, b: f64) -> f64 {
        quad::integrate_with_breaks(|z| self.eval(i, z), a, b, &self.breakpoints(i), 1e-13)
    }

    /// (group, c, A) samples: `n` evenly spaced costs over each group's support.
    pub fn samples(&self, n: usize) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for i in 0..self.point.num_groups() {
            let d = self.point.dist(i);
            for k in 0..n {
                let c = d.c_min() + d.width() * k as f64 / (n - 1).max(1) as f64;
                out.push((i, c, self.eval(i, c)));
            }
        }
        out
    }

    /// s (sum_i q_i int phi_i A_i f_i + l), the virtual-cost form of expected spend.
    pub fn budget_used(&self, dens: &VirtualCostDensity) -> f64 {
        let l = budget_residual_unchecked(&self.point).value;
        let knee = self.phi_hat.clamp(dens.phi_min, dens.phi_max);
        let spend = dens.integrate(|p| p * self.of_phi(p), dens.phi_min, knee)
            + dens.integrate(|p| p * self.of_phi(p), knee, dens.phi_max);
        self.point.config.population_size as f64 * (spend + l)
    }
}

/// Solves for the optimal allocation rule at the market's profile.
pub fn solve_allocation(point: &MarketPoint) -> Result<AllocationRule> {
    let dens = VirtualCostDensity::new(point)?;
    solve_allocation_with(point, &dens)
}

/// As [`solve_allocation`], reusing a density.
pub fn solve_allocation_with(point: &MarketPoint, dens: &VirtualCostDensity) -> Result<AllocationRule> {
    let resid = budget_residual(point)?;
    let big_l = resid.gap;
    let cfg = &point.config;
    let (gamma, th, s) = (cfg.gamma, point.theta_bar(), cfg.population_size as f64);
    let g_th = gamma * th;
    let (lo, hi) = (dens.phi_min, dens.phi_max);
    let r = |x: f64| {
        let x = x.max(f64::MIN_POSITIVE);
        r_c(x, dens, gamma, th, s).expect("x > 0")
    };
    let total_phi = dens.integrate(|p| p, lo, hi);
    let total_sqrt = dens.integrate(f64::sqrt, lo, hi);

    if big_l >= total_phi {
        return Err(LeakError::Precondition(format!(
            "no-trivial-solution assumption: B/s - l = {big_l:.6e} >= int phi omega = {total_phi:.6e}, so selecting everyone is affordable"
        )));
    }

    // Ratios compared by cross-multiplication so gamma = 0 needs no special case.
    // Case 1: L/(gamma theta) < Q_c(lo)/R_c(lo).
    if lo > 0.0 && big_l * r(lo) < g_th * q_c(lo, dens) {
        let eta = big_l / total_sqrt;
        return AllocationRule::build(point, Structure::StrictlyDecreasing, CaseTag::One, 0.0, f64::NEG_INFINITY, eta);
    }
    // Case 3: L/(gamma theta) >= Q_c(hi)/R_c(hi).
    if big_l * r(hi) >= g_th * total_phi {
        let chi = big_l / total_phi;
        return AllocationRule::build(point, Structure::Flat, CaseTag::Three, chi, f64::INFINITY, 0.0);
    }
    // Case 2: L R_c(x) - gamma theta Q_c(x) is decreasing; find its root.
    let phi_prime = quad::bisect(|x| big_l * r(x) - g_th * q_c(x, dens), lo, hi, KNEE_TOL * hi.max(1.0));
    let q_prime = q_c(phi_prime, dens);
    let (case, chi, phi_hat) = if big_l <= q_prime {
        (CaseTag::TwoA, big_l / q_prime, phi_prime)
    } else {
        // Plateau saturates at 1; the knee is where the budget is exactly spent.
        let phi_hat = quad::bisect(|x| q_c(x, dens) - big_l, lo, phi_prime, KNEE_TOL * hi.max(1.0));
        (CaseTag::TwoB, 1.0, phi_hat)
    };
    let head = dens.integrate(|p| p, lo, phi_hat);
    let tail = dens.integrate(f64::sqrt, phi_hat, hi);
    let eta = if tail > 0.0 { (big_l - chi * head) / tail } else { chi * phi_hat.sqrt() };
    AllocationRule::build(point, Structure::FixedThenDecreasing, case, chi, phi_hat, eta)
}

/// Residual of the single-formula knee definition
/// Q_c(x) / max(1, R_c(x)/(gamma theta)) - (B/s - l). Used to compare against the
/// sub-case split.
pub fn unified_knee_residual(point: &MarketPoint, dens: &VirtualCostDensity, x: f64) -> Result<f64> {
    let resid = budget_residual(point)?;
    let cfg = &point.config;
    let th = point.theta_bar();
    let r = r_c(x, dens, cfg.gamma, th, cfg.population_size as f64)?;
    Ok(q_c(x, dens) / (r / (cfg.gamma * th)).max(1.0) - resid.gap)
}
