//! Worst-case bias and variance of the Horvitz-Thompson estimator, the adversary's best
//! response, the reduced low-budget objective and the full-participation conditions.
//!
//! All expectations run over the participant measure `sum_i q_i f_i(c) dc` on
//! `[c_min, tau_i]`, which has total mass theta. Both A and p are functions of the virtual
//! cost, so the integrals are taken against the virtual-cost density.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{budget_residual, budget_residual_unchecked, check_low_budget, AllocationRule};
use crate::error::{LeakError, Result};
use crate::market::{MarketConfig, MarketPoint};
use crate::minimax::{discretize_panels, solve_discrete};
use crate::payment::Mechanism;
use crate::quad;
use crate::virtual_cost::VirtualCostDensity;

/// Step of the finite differences in participation rates.
pub const RATE_STEP: f64 = 1e-5;
/// Quadrature tolerance used where results are differenced.
const TIGHT_TOL: f64 = 1e-13;

/// Data distribution chosen by the adversary: P(x = 1 | phi) for a participant with
/// virtual cost phi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryProfile {
    /// p = 1 above `cut` and min(1, ramp * phi) at or below it.
    Threshold { cut: f64, ramp: f64 },
    /// Piecewise constant: `values[k]` on [edges[k], edges[k+1]).
    Table { edges: Vec<f64>, values: Vec<f64> },
}

impl AdversaryProfile {
    pub fn constant(p: f64) -> Self {
        if p >= 1.0 {
            Self::Threshold { cut: f64::NEG_INFINITY, ramp: 0.0 }
        } else {
            Self::Table { edges: vec![f64::NEG_INFINITY, f64::INFINITY], values: vec![p] }
        }
    }

    pub fn of_phi(&self, phi: f64) -> f64 {
        match self {
            Self::Threshold { cut, ramp } => {
                if phi > *cut {
                    1.0
                } else {
                    (ramp * phi).min(1.0)
                }
            }
            Self::Table { edges, values } => {
                let k = edges.partition_point(|&e| e <= phi).clamp(1, values.len()) - 1;
                values[k]
            }
        }
    }

    /// p_i(c); above tau_i the value at tau_i is continued.
    pub fn eval(&self, alloc: &AllocationRule, i: usize, c: f64) -> f64 {
        let c = c.min(alloc.point.tau(i));
        self.of_phi(alloc.phi(i, c))
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Self::Threshold { cut, ramp } => {
                let mut v = vec![*cut];
                if *ramp > 0.0 {
                    v.push(1.0 / ramp);
                }
                v
            }
            Self::Table { edges, .. } => edges.clone(),
        }
    }
}

/// E[p] and E[p/A] over participants, split at the kinks of both functions.
pub fn moments<A, P>(dens: &VirtualCostDensity, a: A, p: P, breaks: &[f64]) -> Result<(f64, f64)>
where
    A: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&x| x > dens.phi_min && x < dens.phi_max).collect();
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup();
    let mut lo = dens.phi_min;
    let (mut mp, mut mr) = (0.0, 0.0);
    for &hi in pts.iter().chain(std::iter::once(&dens.phi_max)) {
        mp += dens.integrate(&p, lo, hi);
        mr += dens.integrate(
            |x| {
                let pv = p(x);
                if pv == 0.0 {
                    0.0
                } else {
                    pv / a(x)
                }
            },
            lo,
            hi,
        );
        lo = hi;
    }
    if !mr.is_finite() {
        return Err(LeakError::InfiniteVariance);
    }
    Ok((mp, mr))
}

/// (1/(s theta)) (E[p/A]/theta - (E[p]/theta)^2).
pub fn variance_formula(mean_p: f64, mean_ratio: f64, theta: f64, s: f64) -> f64 {
    (mean_ratio / theta - (mean_p / theta).powi(2)) / (s * theta)
}

/// (1 - theta)(1 - E[p]/theta); non-participants' data are pinned at 1.
pub fn bias_formula(mean_p: f64, theta: f64) -> f64 {
    (1.0 - theta) * (1.0 - mean_p / theta)
}

fn alloc_breaks(alloc: &AllocationRule) -> Vec<f64> {
    vec![alloc.phi_hat]
}

fn density(point: &MarketPoint) -> Result<VirtualCostDensity> {
    Ok(VirtualCostDensity::new(point)?.with_tolerance(1e-12))
}

/// Worst-case variance of the Horvitz-Thompson estimator for a given adversary.
pub fn ht_variance(mech: &Mechanism, adv: &AdversaryProfile) -> Result<f64> {
    let p = mech.point();
    let dens = density(p)?;
    let mut br = alloc_breaks(&mech.allocation);
    br.extend(adv.breakpoints());
    let (mp, mr) = moments(&dens, |x| mech.allocation.of_phi(x), |x| adv.of_phi(x), &br)?;
    Ok(variance_formula(mp, mr, p.theta_bar(), p.config.population_size as f64))
}

/// Worst-case bias for a given adversary.
pub fn worst_case_bias(point: &MarketPoint, adv: &AdversaryProfile) -> Result<f64> {
    let dens = density(point)?;
    let mp: f64 = {
        let (mp, _) = moments(&dens, |_| 1.0, |x| adv.of_phi(x), &adv.breakpoints())?;
        mp
    };
    Ok(bias_formula(mp, point.theta_bar()))
}

/// Adversary best response to the allocation, computed exactly.
///
/// For a fixed mass S = E[p] the payoff is linear in p, so the adversary puts p = 1
/// where 1/A is largest; the payoff is then concave in S and S is set where its
/// derivative `a (1/A - 2S/theta) - (1-gamma)(1-theta)/theta` vanishes, with
/// `a = gamma/(s theta^2)`. On the constant part of A the adversary is indifferent;
/// the required mass is spread along p = min(1, t phi), the shape the discrete game
/// selects.
pub fn adversary_best_response(mech: &Mechanism) -> Result<AdversaryProfile> {
    let p = mech.point();
    let dens = density(p)?;
    adversary_best_response_with(&mech.allocation, &dens)
}

pub fn adversary_best_response_with(alloc: &AllocationRule, dens: &VirtualCostDensity) -> Result<AdversaryProfile> {
    let p = &alloc.point;
    let th = p.theta_bar();
    let gamma = p.config.gamma;
    let s = p.config.population_size as f64;
    let aw = gamma / (s * th * th);
    let bw = (1.0 - gamma) * (1.0 - th);
    let (lo, hi) = (dens.phi_min, dens.phi_max);
    let none = AdversaryProfile::Threshold { cut: f64::INFINITY, ramp: 0.0 };
    if aw == 0.0 {
        return Ok(none);
    }
    let knee = alloc.phi_hat.clamp(lo, hi);
    let above = |x: f64| dens.integrate(|_| 1.0, x, hi);
    let slope = |x: f64, mass: f64| aw * (1.0 / alloc.of_phi(x) - 2.0 * mass / th) - bw / th;
    if slope(hi, 0.0) <= 0.0 {
        return Ok(AdversaryProfile::Threshold { cut: hi, ramp: 0.0 });
    }
    let m_knee = above(knee);
    if knee < hi && slope(knee, m_knee) <= 0.0 {
        let cut = quad::bisect(|x| slope(x, above(x)), knee, hi, 1e-14 * hi.max(1.0));
        return Ok(AdversaryProfile::Threshold { cut, ramp: 0.0 });
    }
    // The plateau is partly or fully used.
    let chi = alloc.of_phi(lo);
    let target = 0.5 * th * (1.0 / chi - bw / (aw * th));
    let plateau_mass = (th - m_knee).max(0.0);
    let fill = (target - m_knee).clamp(0.0, plateau_mass);
    if fill >= plateau_mass * (1.0 - 1e-13) {
        return Ok(AdversaryProfile::Threshold { cut: f64::NEG_INFINITY, ramp: 0.0 });
    }
    let ramp_mass = |t: f64| dens.integrate(|x| (t * x).min(1.0), lo, knee);
    let mut t_hi = 1.0 / knee.max(f64::MIN_POSITIVE);
    while ramp_mass(t_hi) < fill {
        t_hi *= 2.0;
    }
    let t = quad::bisect(|t| ramp_mass(t) - fill, 0.0, t_hi, 1e-15 * t_hi);
    Ok(AdversaryProfile::Threshold { cut: knee, ramp: t })
}

/// Adversary read off the discrete saddle with `k` panels, lifted back to a step function.
pub fn discrete_adversary(mech: &Mechanism, k: usize) -> Result<AdversaryProfile> {
    let p = mech.point();
    let dens = density(p)?;
    let (inst, panels) = discretize_panels(p, &dens, k)?;
    let sad = solve_discrete(&inst)?;
    let mut edges: Vec<f64> = panels.iter().map(|&(a, _)| a).collect();
    edges[0] = f64::NEG_INFINITY;
    edges.push(f64::INFINITY);
    Ok(AdversaryProfile::Table { edges, values: sad.p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedObjective {
    pub t_star: f64,
    pub u: f64,
    pub r: f64,
    /// B/s - l.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub worst_case_variance: f64,
    pub worst_case_bias: f64,
    pub gamma: f64,
    /// gamma V + (1 - gamma) bias.
    pub objective: f64,
    pub budget_used: f64,
    pub adversary: AdversaryProfile,
    pub reduced: Option<ReducedObjective>,
    /// For data in [0, 1] rather than {0, 1} the objective is an upper bound.
    pub upper_bound_for_bounded_data: bool,
}

/// Objective pieces at an arbitrary (A, p) pair; `breaks` lists kinks of either.
pub fn evaluate<A, P>(point: &MarketPoint, dens: &VirtualCostDensity, a: A, p: P, breaks: &[f64]) -> Result<(f64, f64, f64)>
where
    A: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    let (mp, mr) = moments(dens, a, p, breaks)?;
    let th = point.theta_bar();
    let v = variance_formula(mp, mr, th, point.config.population_size as f64);
    let b = bias_formula(mp, th);
    let g = point.config.gamma;
    Ok((v, b, g * v + (1.0 - g) * b))
}

pub fn worst_case_tradeoff(mech: &Mechanism) -> Result<TradeoffReport> {
    let p = mech.point();
    let dens = density(p)?;
    let adv = adversary_best_response_with(&mech.allocation, &dens)?;
    let mut br = alloc_breaks(&mech.allocation);
    br.extend(adv.breakpoints());
    let (v, b, t) = evaluate(p, &dens, |x| mech.allocation.of_phi(x), |x| adv.of_phi(x), &br)?;
    let reduced = if check_low_budget(p, &dens)? { Some(reduced_objective_unchecked(p)?) } else { None };
    Ok(TradeoffReport {
        worst_case_variance: v,
        worst_case_bias: b,
        gamma: p.config.gamma,
        objective: t,
        budget_used: mech.allocation.budget_used(&dens),
        adversary: adv,
        reduced,
        upper_bound_for_bounded_data: true,
    })
}

/// r = (sum_i q_i int sqrt(phi_i) f_i)^2 over participants.
pub fn r_value(point: &MarketPoint) -> Result<f64> {
    let dens = VirtualCostDensity::new(point)?.with_tolerance(TIGHT_TOL);
    Ok(dens.integrate(f64::sqrt, dens.phi_min, dens.phi_max).powi(2))
}

/// T* = (gamma/s)(U - 1/theta) with U = r/(theta^2 (B/s - l)), valid in the low-budget regime.
pub fn reduced_objective(point: &MarketPoint) -> Result<ReducedObjective> {
    let dens = VirtualCostDensity::new(point)?;
    if !check_low_budget(point, &dens)? {
        return Err(LeakError::Regime(
            "the profile is outside the low-budget regime; use worst_case_tradeoff for the full objective".into(),
        ));
    }
    reduced_objective_unchecked(point)
}

/// The reduced objective without the regime check (still requires B/s > l).
pub fn reduced_objective_unchecked(point: &MarketPoint) -> Result<ReducedObjective> {
    let gap = budget_residual(point)?.gap;
    let r = r_value(point)?;
    let th = point.theta_bar();
    let u = r / (th * th * gap);
    let g = point.config.gamma;
    let s = point.config.population_size as f64;
    Ok(ReducedObjective { t_star: g / s * (u - 1.0 / th), u, r, gap })
}

/// Finite difference of `f` in the rate of group i: central inside, one-sided at the
/// ends of [theta_min, 1].
pub fn rate_derivative<F>(point: &MarketPoint, i: usize, f: F) -> Result<f64>
where
    F: Fn(&MarketPoint) -> Result<f64>,
{
    let h = RATE_STEP;
    let rates = &point.profile.rates;
    let at = |x: f64| -> Result<f64> {
        let mut r = rates.clone();
        r[i] = x;
        f(&point.with_rates(r)?)
    };
    let x = rates[i];
    let lo = point.config.theta_min;
    if x + h > 1.0 {
        Ok((at(x)? - at(x - h)?) / h)
    } else if x - h < lo {
        Ok((at(x + h)? - at(x)?) / h)
    } else {
        Ok((at(x + h)? - at(x - h)?) / (2.0 * h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPoint {
    pub rates: Vec<f64>,
    pub low_budget: bool,
    pub error: Option<String>,
    pub w_prime: f64,
    pub d: Vec<f64>,
    pub delta: Vec<f64>,
    /// dDelta_i/dtheta_i.
    pub delta_prime: Vec<f64>,
    /// Numerical dT*/dtheta_i.
    pub t_slope: Vec<f64>,
    pub prop1: bool,
    pub prop2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullParticipationReport {
    pub points: Vec<ConditionPoint>,
    /// Hypotheses of the benefit-driven condition hold at every grid point.
    pub prop1_holds: bool,
    /// Hypotheses of the leakage-driven condition hold at every grid point.
    pub prop2_holds: bool,
    /// Largest numerical dT*/dtheta_i over the grid.
    pub max_t_slope: f64,
    /// When either hypothesis holds, every slope is at most 1e-9.
    pub consistent: bool,
}

/// D_i and delta_i at one profile, with the numerical slope of T*.
pub fn condition_point(point: &MarketPoint) -> Result<ConditionPoint> {
    let n = point.num_groups();
    let dens = VirtualCostDensity::new(point)?;
    let low_budget = check_low_budget(point, &dens)?;
    let red = reduced_objective_unchecked(point)?;
    let (r, gap) = (red.r, red.gap);
    let th = point.theta_bar();
    let w = point.benefit();
    let w_prime = point.model().benefit_slope();
    let mut d = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let mut delta_prime = vec![0.0; n];
    let mut t_slope = vec![0.0; n];
    for i in 0..n {
        let q = point.mass(i);
        let ti = point.rate(i);
        let dr = rate_derivative(point, i, r_value)?;
        let mut cross = 0.0;
        for j in 0..n {
            let dj = rate_derivative(point, i, |pt| Ok(pt.threshold_gap(j)))?;
            if j == i {
                delta_prime[i] = dj;
            } else {
                cross += point.mass(j) * point.rate(j) * dj;
            }
        }
        let di = point.threshold_gap(i);
        d[i] = (ti * delta_prime[i] + di - w) / th + dr * gap / (th * q * r) - 2.0 * gap / (th * th)
            + gap * gap / (th * r)
            + cross / (q * th);
        delta[i] = (w + th * w_prime - di) / ti - dr * gap / (ti * q * r) + 2.0 * gap / (ti * th)
            - gap * gap / (ti * r)
            - cross / (q * ti);
        t_slope[i] = rate_derivative(point, i, |pt| reduced_objective_unchecked(pt).map(|x| x.t_star))?;
    }
    let prop1 = low_budget && (0..n).all(|i| w_prime >= d[i]);
    let prop2 = low_budget && (0..n).all(|i| delta_prime[i] <= delta[i]);
    Ok(ConditionPoint {
        rates: point.profile.rates.clone(),
        low_budget,
        error: None,
        w_prime,
        d,
        delta,
        delta_prime,
        t_slope,
        prop1,
        prop2,
    })
}

/// Evaluates both full-participation conditions on a grid of `per_axis` rates per group
/// spanning [theta_min, 1], and cross-checks them against the numerical slope of T*.
pub fn full_participation_check(config: &MarketConfig, per_axis: usize) -> Result<FullParticipationReport> {
    config.validate()?;
    let n = config.groups.len();
    let per_axis = per_axis.max(2);
    let axis: Vec<f64> = (0..per_axis)
        .map(|k| config.theta_min + (1.0 - config.theta_min) * k as f64 / (per_axis - 1) as f64)
        .collect();
    let total = per_axis.pow(n as u32);
    let base = config.point()?;
    let points: Vec<ConditionPoint> = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut rates = vec![0.0; n];
            for r in rates.iter_mut() {
                *r = axis[idx % per_axis];
                idx /= per_axis;
            }
            let res = base.with_rates(rates.clone()).and_then(|pt| condition_point(&pt));
            res.unwrap_or_else(|e| ConditionPoint {
                rates,
                low_budget: false,
                error: Some(e.to_string()),
                w_prime: config.privacy_model.benefit_slope,
                d: vec![],
                delta: vec![],
                delta_prime: vec![],
                t_slope: vec![],
                prop1: false,
                prop2: false,
            })
        })
        .collect();
    let prop1_holds = points.iter().all(|p| p.prop1);
    let prop2_holds = points.iter().all(|p| p.prop2);
    let max_t_slope = points.iter().flat_map(|p| p.t_slope.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let consistent = !(prop1_holds || prop2_holds) || max_t_slope <= 1e-9;
    Ok(FullParticipationReport { points, prop1_holds, prop2_holds, max_t_slope, consistent })
}

/// l at a profile, for sweeps that only need the residual.
pub fn residual_at(point: &MarketPoint) -> f64 {
    budget_residual_unchecked(point).value
}
