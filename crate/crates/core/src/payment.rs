//! Truthful payment rule, budget accounting and mechanism audits.
//!
//! For a participant of group i reporting `r` with true cost `c`,
//! `U(r; c) = A(r) [P(r) - c + h(c)] - h(c) + w`, and the payment
//! `P(r) = r - h(r) + ((1 - b) int_r^{c_max} A + kappa) / A(r)` makes truth-telling optimal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationRule, Structure};
use crate::error::{LeakError, Result};
use crate::market::{MarketPoint, ParticipationProfile};
use crate::quad;
use crate::virtual_cost::VirtualCostDensity;

/// Points in the report grid used by the audits.
pub const REPORT_GRID: usize = 1000;
/// Points in the cost grid of the participation audit.
pub const COST_GRID: usize = 2000;
/// Panels used to tabulate tail integrals of A on [c_min, tau].
const TAIL_PANELS: usize = 64;

/// int_c^{c_max} A_i(z) dz, tabulated at panel edges and completed inside a panel
/// with one Gauss-Legendre pass (A is smooth between edges).
#[derive(Debug, Clone)]
struct TailIntegral {
    edges: Vec<f64>,
    cum: Vec<f64>,
}

impl TailIntegral {
    fn new(alloc: &AllocationRule, i: usize) -> Self {
        let d = alloc.point.dist(i);
        let tau = alloc.point.tau(i);
        let mut edges: Vec<f64> =
            (0..=TAIL_PANELS).map(|k| d.c_min() + (tau - d.c_min()) * k as f64 / TAIL_PANELS as f64).collect();
        if let Some(k) = alloc.knee_cost(i) {
            edges.push(k);
        }
        edges.push(d.c_max());
        edges.sort_by(|a, b| a.total_cmp(b));
        edges.dedup();
        let mut cum = vec![0.0; edges.len()];
        for j in (0..edges.len() - 1).rev() {
            cum[j] = cum[j + 1] + quad::integrate(|z| alloc.eval(i, z), edges[j], edges[j + 1], 1e-14);
        }
        Self { edges, cum }
    }

    fn eval(&self, alloc: &AllocationRule, i: usize, c: f64) -> f64 {
        let n = self.edges.len();
        if c >= self.edges[n - 1] {
            return 0.0;
        }
        let j = self.edges.partition_point(|&e| e <= c).clamp(1, n - 1) - 1;
        let right = self.edges[j + 1];
        self.cum[j + 1] + quad::gauss_legendre(&|z| alloc.eval(i, z), c, right)
    }
}

/// A multiplicative change to the payment of group `group` for reports in [lo, hi].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentAdjustment {
    pub group: usize,
    pub lo: f64,
    pub hi: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRule {
    pub kappa: Vec<f64>,
    /// Empty for the truthful rule; used to build deliberately broken mechanisms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjustments: Vec<PaymentAdjustment>,
}

/// kappa_i = h(tau_i) - g(tau_i) - (1 - b_i) int_{tau_i}^{c_max} A_i - w.
pub fn payment_constant(alloc: &AllocationRule, i: usize) -> f64 {
    let p = &alloc.point;
    let d = p.dist(i);
    let tail = alloc.epsilon * (d.c_max() - p.tau(i));
    p.threshold_gap(i) - (1.0 - p.b(i)) * tail - p.benefit()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mechanism {
    pub allocation: AllocationRule,
    pub payment: PaymentRule,
    pub profile: ParticipationProfile,
    #[serde(skip)]
    tails: Vec<TailIntegral>,
}

impl Mechanism {
    /// Attaches the truthful payment rule to an allocation rule.
    pub fn new(allocation: AllocationRule) -> Self {
        let n = allocation.point.num_groups();
        let kappa = (0..n).map(|i| payment_constant(&allocation, i)).collect();
        let profile = allocation.point.profile.clone();
        let tails = (0..n).map(|i| TailIntegral::new(&allocation, i)).collect();
        Self { allocation, payment: PaymentRule { kappa, adjustments: Vec::new() }, profile, tails }
    }

    /// Rebuilds cached tables after deserialization.
    pub fn rehydrate(mut self) -> Result<Self> {
        self.allocation = self.allocation.rehydrate()?;
        self.tails = (0..self.point().num_groups()).map(|i| TailIntegral::new(&self.allocation, i)).collect();
        Ok(self)
    }

    pub fn point(&self) -> &MarketPoint {
        &self.allocation.point
    }

    /// Same mechanism with kappa_i shifted by `delta`.
    pub fn with_kappa_shift(&self, group: usize, delta: f64) -> Self {
        let mut m = self.clone();
        m.payment.kappa[group] += delta;
        m
    }

    /// Same mechanism with payments of `group` scaled by `factor` for reports in [lo, hi].
    pub fn with_payment_scale(&self, group: usize, lo: f64, hi: f64, factor: f64) -> Self {
        let mut m = self.clone();
        m.payment.adjustments.push(PaymentAdjustment { group, lo, hi, factor });
        m
    }

    fn factor(&self, i: usize, r: f64) -> f64 {
        self.payment
            .adjustments
            .iter()
            .filter(|a| a.group == i && r >= a.lo && r <= a.hi)
            .map(|a| a.factor)
            .product()
    }

    /// int_c^{c_max} A_i.
    pub fn tail(&self, i: usize, c: f64) -> f64 {
        self.tails[i].eval(&self.allocation, i, c)
    }

    /// A_i(r) P_i(r), finite even where A vanishes.
    pub fn expected_payment(&self, i: usize, r: f64) -> f64 {
        let p = self.point();
        let a = self.allocation.eval(i, r);
        let b = p.b(i);
        (a * (r - p.h(i, r)) + (1.0 - b) * self.tail(i, r) + self.payment.kappa[i]) * self.factor(i, r)
    }

    /// P_i(r) for a report in [c_min, tau_i].
    pub fn payment(&self, r: f64, i: usize) -> Result<f64> {
        let p = self.point();
        let d = p.dist(i);
        if !(r >= d.c_min() && r <= p.tau(i)) {
            return Err(LeakError::Domain(format!(
                "report {r} outside the participant range [{}, {}] of group {i}",
                d.c_min(),
                p.tau(i)
            )));
        }
        let a = self.allocation.eval(i, r);
        if !(a > 0.0) {
            return Err(LeakError::UndefinedPayment { group: i, cost: r });
        }
        Ok(self.expected_payment(i, r) / a)
    }

    /// Payment under the same allocation in a market without leakage (b = 0, so h = g = 0).
    pub fn payment_without_leakage(&self, r: f64, i: usize) -> Result<f64> {
        let a = self.allocation.eval(i, r);
        if !(a > 0.0) {
            return Err(LeakError::UndefinedPayment { group: i, cost: r });
        }
        let p = self.point();
        let kappa0 = -self.allocation.epsilon * (p.dist(i).c_max() - p.tau(i)) - p.benefit();
        Ok(r + (self.tail(i, r) + kappa0) / a)
    }

    /// Expected utility U_i(r; c) of a participant with cost c reporting r.
    pub fn utility(&self, i: usize, r: f64, c: f64) -> f64 {
        let p = self.point();
        let a = self.allocation.eval(i, r);
        let h = p.h(i, c);
        self.expected_payment(i, r) - a * (c - h) - h + p.benefit()
    }
}

/// Expected spend computed two ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccount {
    /// s sum_i q_i int_{c_min}^{tau_i} A_i P_i f_i.
    pub direct: f64,
    /// s (sum_i q_i int phi_i A_i f_i + l).
    pub virtual_form: f64,
    pub identity_gap: f64,
    pub budget: f64,
}

pub fn expected_total_payment(mech: &Mechanism) -> Result<BudgetAccount> {
    let p = mech.point();
    let dens = VirtualCostDensity::new(p)?.with_tolerance(1e-12);
    expected_total_payment_with(mech, &dens)
}

pub fn expected_total_payment_with(mech: &Mechanism, dens: &VirtualCostDensity) -> Result<BudgetAccount> {
    let p = mech.point();
    let s = p.config.population_size as f64;
    let mut direct = 0.0;
    for i in 0..p.num_groups() {
        let d = p.dist(i);
        let breaks: Vec<f64> = mech.allocation.knee_cost(i).into_iter().collect();
        let part = quad::integrate_with_breaks(
            |c| mech.expected_payment(i, c) * d.pdf(c),
            d.c_min(),
            p.tau(i),
            &breaks,
            1e-12,
        );
        direct += p.mass(i) * part;
    }
    let direct = s * direct;
    let virtual_form = mech.allocation.budget_used(dens);
    Ok(BudgetAccount { direct, virtual_form, identity_gap: (direct - virtual_form).abs(), budget: p.config.budget })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthViolation {
    pub group: usize,
    pub cost: f64,
    pub best_report: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthfulnessVerdict {
    pub passed: bool,
    pub structure: Structure,
    pub samples: usize,
    /// Samples whose truthful report beats every report more than one grid step away.
    pub strict: usize,
    /// Samples tied with a distant report, both on the constant part of A.
    pub plateau_ties: usize,
    /// Ties anywhere else; these fail the audit.
    pub other_ties: usize,
    pub violations: Vec<TruthViolation>,
}

struct ReportGrid {
    reports: Vec<f64>,
    /// A(r) and A(r)P(r) on the grid.
    a: Vec<f64>,
    ap: Vec<f64>,
    step: f64,
}

fn report_grid(mech: &Mechanism, i: usize) -> ReportGrid {
    let p = mech.point();
    let lo = p.dist(i).c_min();
    let tau = p.tau(i);
    let step = (tau - lo) / (REPORT_GRID - 1) as f64;
    let reports: Vec<f64> = (0..REPORT_GRID).map(|k| if k + 1 == REPORT_GRID { tau } else { lo + step * k as f64 }).collect();
    let a = reports.iter().map(|&r| mech.allocation.eval(i, r)).collect();
    let ap = reports.iter().map(|&r| mech.expected_payment(i, r)).collect();
    ReportGrid { reports, a, ap, step }
}

impl ReportGrid {
    fn utility(&self, mech: &Mechanism, i: usize, k: usize, c: f64) -> f64 {
        let p = mech.point();
        let h = p.h(i, c);
        self.ap[k] - self.a[k] * (c - h) - h + p.benefit()
    }
}

/// Checks on `samples` random participants that no report on a 1000-point grid beats the
/// truth. A sample is strict when every report more than one grid step away is worse by
/// more than a relative 1e-11; SD rules must be strict everywhere.
pub fn truthfulness_audit(mech: &Mechanism, samples: usize, seed: u64) -> TruthfulnessVerdict {
    let p = mech.point();
    let n = p.num_groups();
    let grids: Vec<ReportGrid> = (0..n).map(|i| report_grid(mech, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, f64)> = (0..samples)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut i = 0;
            let mut acc = p.mass(0);
            while u > acc && i + 1 < n {
                i += 1;
                acc += p.mass(i);
            }
            let lo = p.dist(i).c_min();
            (i, lo + (p.tau(i) - lo) * rng.gen::<f64>())
        })
        .collect();

    #[derive(Default)]
    struct Tally {
        strict: usize,
        plateau: usize,
        other: usize,
        violation: Option<TruthViolation>,
    }
    let tallies: Vec<Tally> = draws
        .par_iter()
        .map(|&(i, c)| {
            let g = &grids[i];
            let truth = mech.utility(i, c, c);
            let scale = 1.0 + truth.abs();
            let mut t = Tally::default();
            let (mut best, mut best_u) = (c, truth);
            let knee = mech.allocation.plateau_end(i).unwrap_or(f64::NEG_INFINITY);
            let on_plateau = |x: f64| x <= knee + g.step;
            let mut tie_plateau = false;
            let mut tie_other = false;
            for k in 0..g.reports.len() {
                let r = g.reports[k];
                let u = g.utility(mech, i, k, c);
                if u > best_u {
                    best_u = u;
                    best = r;
                }
                if (r - c).abs() > g.step && u >= truth - 1e-11 * scale {
                    if on_plateau(r) && on_plateau(c) {
                        tie_plateau = true;
                    } else {
                        tie_other = true;
                    }
                }
            }
            let gain = best_u - truth;
            if gain > 1e-9 * scale {
                t.violation = Some(TruthViolation { group: i, cost: c, best_report: best, gain });
            }
            if tie_other {
                t.other = 1;
            } else if tie_plateau {
                t.plateau = 1;
            } else {
                t.strict = 1;
            }
            t
        })
        .collect();
    let violations: Vec<TruthViolation> = tallies.iter().filter_map(|t| t.violation.clone()).collect();
    let strict = tallies.iter().map(|t| t.strict).sum();
    let plateau_ties = tallies.iter().map(|t| t.plateau).sum();
    let other_ties = tallies.iter().map(|t| t.other).sum();
    let structure = mech.allocation.structure;
    let strict_ok = structure != Structure::StrictlyDecreasing || strict == samples;
    TruthfulnessVerdict {
        passed: violations.is_empty() && other_ties == 0 && strict_ok,
        structure,
        samples,
        strict,
        plateau_ties,
        other_ties,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParticipation {
    pub group: usize,
    pub tau: f64,
    /// Largest cost whose best participation utility still reaches -g.
    pub boundary: f64,
    pub implied_rate: f64,
    pub target_rate: f64,
    /// U(tau; tau) + g(tau); zero for the marginal participant.
    pub indifference_gap: f64,
    /// First grid cost whose decision contradicts the threshold, if any.
    pub first_contradiction: Option<f64>,
    pub grid_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationVerdict {
    pub passed: bool,
    pub groups: Vec<GroupParticipation>,
}

/// Best-response join decisions on a 2000-point cost grid.
///
/// An agent joins when the best utility over reports in [c_min, tau_i] (plus the truthful
/// report when c <= tau_i) is at least -g(c); exact ties count as joining. The audit asks
/// that decisions flip within one grid step of tau_i, that the boundary reproduces
/// theta_i within 1e-3, and that the marginal participant is indifferent within 1e-8.
pub fn participation_audit(mech: &Mechanism) -> ParticipationVerdict {
    let p = mech.point();
    let groups: Vec<GroupParticipation> = (0..p.num_groups())
        .into_par_iter()
        .map(|i| {
            let d = p.dist(i);
            let tau = p.tau(i);
            let g = report_grid(mech, i);
            let margin = |c: f64| {
                let mut best = f64::NEG_INFINITY;
                for k in 0..g.reports.len() {
                    best = best.max(g.utility(mech, i, k, c));
                }
                if c <= tau {
                    best = best.max(mech.utility(i, c, c));
                }
                best + p.g(i, c)
            };
            let tol = 1e-10;
            let step = d.width() / (COST_GRID - 1) as f64;
            let mut first = None;
            for k in 0..COST_GRID {
                let c = d.c_min() + step * k as f64;
                let m = margin(c);
                let contradicts = (c > tau + step && m > tol) || (c < tau - step && m < -tol);
                if contradicts {
                    first = Some(c);
                    break;
                }
            }
            let boundary = if margin(d.c_max()) >= -tol {
                d.c_max()
            } else if margin(d.c_min()) < -tol {
                d.c_min()
            } else {
                quad::bisect(|c| margin(c) + tol, d.c_min(), d.c_max(), 1e-13 * d.width())
            };
            let implied_rate = d.cdf(boundary);
            GroupParticipation {
                group: i,
                tau,
                boundary,
                implied_rate,
                target_rate: p.rate(i),
                indifference_gap: mech.utility(i, tau, tau) + p.g(i, tau),
                first_contradiction: first,
                grid_step: step,
            }
        })
        .collect();
    let passed = groups.iter().all(|g| {
        g.first_contradiction.is_none()
            && (g.implied_rate - g.target_rate).abs() <= 1e-3
            && g.indifference_gap.abs() <= 1e-8
    });
    ParticipationVerdict { passed, groups }
}

/// Largest relative error between a central difference of U(c; c) and
/// -(1 - b) A(c) - b over `n` interior costs of group i, skipping the knee.
pub fn envelope_check(mech: &Mechanism, i: usize, n: usize) -> f64 {
    let p = mech.point();
    let d = p.dist(i);
    let tau = p.tau(i);
    let h = 1e-6 * d.width();
    let knee = mech.allocation.knee_cost(i);
    let b = p.b(i);
    let mut worst: f64 = 0.0;
    for k in 1..=n {
        let c = d.c_min() + (tau - d.c_min()) * k as f64 / (n + 1) as f64;
        if c - h < d.c_min() || c + h > tau || knee.is_some_and(|x| (x - c).abs() < 2.0 * h) {
            continue;
        }
        let num = (mech.utility(i, c + h, c + h) - mech.utility(i, c - h, c - h)) / (2.0 * h);
        let exact = -(1.0 - b) * mech.allocation.eval(i, c) - b;
        worst = worst.max((num - exact).abs() / exact.abs().max(1e-300));
    }
    worst
}
