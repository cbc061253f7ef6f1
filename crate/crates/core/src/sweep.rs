//! One-parameter sweeps: re-solve the mechanism along an axis and tabulate payments and
//! the trade-off objective, then check the monotone claims or search for exhibits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{check_low_budget, solve_allocation_with, CaseTag, Structure};
use crate::error::{LeakError, Result};
use crate::market::{MarketConfig, MarketPoint};
use crate::payment::Mechanism;
use crate::quad;
use crate::tradeoff::{reduced_objective_unchecked, worst_case_tradeoff};
use crate::virtual_cost::VirtualCostDensity;

/// Relative slack allowed when asserting a monotone direction.
const MONOTONE_TOL: f64 = 1e-10;
/// Relative size a move must have to count towards a non-monotone exhibit.
const EXHIBIT_TOL: f64 = 1e-9;
/// Rate grid used when searching for the objective-minimizing rate of the swept group.
const RATE_GRID: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Budget,
    AlphaIntra,
    AlphaInter,
    ThetaI,
}

impl std::str::FromStr for SweepAxis {
    type Err = LeakError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(Self::Budget),
            "alpha_intra" => Ok(Self::AlphaIntra),
            "alpha_inter" => Ok(Self::AlphaInter),
            "theta_i" => Ok(Self::ThetaI),
            other => Err(LeakError::Domain(format!(
                "unknown sweep axis `{other}` (expected budget, alpha_intra, alpha_inter or theta_i)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Budget => "budget",
            Self::AlphaIntra => "alpha_intra",
            Self::AlphaInter => "alpha_inter",
            Self::ThetaI => "theta_i",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub axis: SweepAxis,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
    /// Group whose parameter is swept and whose payments are reported.
    pub group: usize,
    /// Cost at which the individual payment is reported; defaults to the
    /// theta_min/2 quantile, which participates at every admissible rate.
    pub probe_cost: Option<f64>,
}

impl SweepRequest {
    pub fn new(axis: SweepAxis, from: f64, to: f64, steps: usize) -> Self {
        Self { axis, from, to, steps, group: 0, probe_cost: None }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.steps;
        (0..n).map(|k| self.from + (self.to - self.from) * k as f64 / (n - 1) as f64).collect()
    }

    fn validate(&self, config: &MarketConfig) -> Result<()> {
        if self.steps < 2 {
            return Err(LeakError::Domain("a sweep needs at least 2 steps".into()));
        }
        if !(self.from.is_finite() && self.to.is_finite()) || self.from == self.to {
            return Err(LeakError::Domain(format!("empty sweep range [{}, {}]", self.from, self.to)));
        }
        if self.group >= config.num_groups() {
            return Err(LeakError::Domain(format!("group {} does not exist", self.group)));
        }
        Ok(())
    }
}

/// `config` with the swept parameter set to `v`.
pub fn apply_axis(config: &MarketConfig, axis: SweepAxis, group: usize, v: f64) -> Result<MarketConfig> {
    let mut c = config.clone();
    match axis {
        SweepAxis::Budget => c.budget = v,
        SweepAxis::AlphaIntra => c.groups[group].correlation.intra = v,
        SweepAxis::AlphaInter => c.groups[group].correlation.inter = v,
        SweepAxis::ThetaI => {
            let mut r = c.participation.clone().unwrap_or_else(|| vec![1.0; c.num_groups()]);
            r[group] = v;
            c.participation = Some(r);
        }
    }
    c.validate()?;
    Ok(c)
}

/// A_i(r) P_i(r) at `point` when the allocation, as a function of cost, is held at the
/// one of `base`. Leakage, thresholds and the participation constant follow `point`.
pub fn frozen_expected_payment(base: &Mechanism, point: &MarketPoint, i: usize, r: f64) -> f64 {
    let a = base.allocation.eval(i, r);
    let b = point.b(i);
    let tau = point.tau(i);
    a * (r - point.h(i, r)) + (1.0 - b) * (base.tail(i, r) - base.tail(i, tau)) + point.threshold_gap(i) - point.benefit()
}

/// s q_i int_{c_min}^{tau_i} A_i P_i f_i for an expected-payment function of the report.
fn group_total<F: Fn(f64) -> f64>(point: &MarketPoint, i: usize, breaks: &[f64], ap: F) -> f64 {
    let d = point.dist(i);
    let s = point.config.population_size as f64;
    s * point.mass(i) * quad::integrate_with_breaks(|c| ap(c) * d.pdf(c), d.c_min(), point.tau(i), breaks, 1e-11)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    /// Solver or evaluation failure at this point; the remaining columns are NaN.
    pub error: Option<String>,
    pub structure: Option<Structure>,
    pub case: Option<CaseTag>,
    pub low_budget: bool,
    /// Expected total payment to the swept group, mechanism re-solved.
    pub group_payment: f64,
    /// Payment at the probe cost, mechanism re-solved.
    pub individual_payment: f64,
    /// Same two quantities with the allocation held at the base mechanism's.
    pub frozen_group_payment: f64,
    pub frozen_individual_payment: f64,
    /// Worst-case objective of the re-solved mechanism.
    pub objective: f64,
    /// Reduced objective T*, present in the low-budget regime.
    pub t_star: Option<f64>,
    /// Objective-minimizing rate of the swept group on a grid (correlation axes only).
    pub optimal_rate: Option<f64>,
}

impl SweepRow {
    fn failed(index: usize, value: f64, e: &LeakError) -> Self {
        Self {
            index,
            value,
            error: Some(e.to_string()),
            structure: None,
            case: None,
            low_budget: false,
            group_payment: f64::NAN,
            individual_payment: f64::NAN,
            frozen_group_payment: f64::NAN,
            frozen_individual_payment: f64::NAN,
            objective: f64::NAN,
            t_star: None,
            optimal_rate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// A monotone direction is asserted.
    Assertion,
    /// A non-monotone exhibit is searched for; finding none is not a failure.
    Exhibit,
    /// The premise of the property does not hold for this configuration.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub property: u8,
    pub kind: CheckKind,
    pub column: String,
    /// Assertions: whether the direction held. Exhibits: whether one was found.
    pub outcome: bool,
    /// First row index breaking the asserted direction.
    pub first_violation: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub group: usize,
    pub probe_cost: f64,
    pub rows: Vec<SweepRow>,
    pub checks: Vec<PropertyCheck>,
}

impl SweepReport {
    /// True when every assertion holds; exhibits never fail a sweep.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.kind != CheckKind::Assertion || c.outcome)
    }

    pub fn failed_points(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Index of the first entry exceeding its predecessor by more than the tolerance.
pub fn first_increase(xs: &[(usize, f64)]) -> Option<usize> {
    xs.windows(2).find(|w| w[1].1 > w[0].1 + MONOTONE_TOL * w[0].1.abs().max(1e-300)).map(|w| w[1].0)
}

/// Whether the series moves both up and down by more than the exhibit tolerance.
pub fn is_non_monotone(xs: &[f64]) -> bool {
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let up = xs.windows(2).any(|w| w[1] - w[0] > EXHIBIT_TOL * scale);
    let down = xs.windows(2).any(|w| w[0] - w[1] > EXHIBIT_TOL * scale);
    up && down
}

fn finite_series(rows: &[SweepRow], f: impl Fn(&SweepRow) -> Option<f64>) -> Vec<(usize, f64)> {
    rows.iter().filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.index, v))).collect()
}

fn assertion(property: u8, column: &str, series: &[(usize, f64)], what: &str) -> PropertyCheck {
    let first = first_increase(series);
    let detail = match first {
        None => format!("{column} non-increasing over {} points ({what})", series.len()),
        Some(k) => format!("{column} increases at row {k} ({what})"),
    };
    PropertyCheck { property, kind: CheckKind::Assertion, column: column.into(), outcome: first.is_none(), first_violation: first, detail }
}

fn exhibit(property: u8, column: &str, series: &[(usize, f64)], what: &str) -> PropertyCheck {
    let vals: Vec<f64> = series.iter().map(|x| x.1).collect();
    let found = is_non_monotone(&vals);
    let detail = format!(
        "{} non-monotone exhibit in {column} over {} points ({what})",
        if found { "found a" } else { "no" },
        vals.len()
    );
    PropertyCheck { property, kind: CheckKind::Exhibit, column: column.into(), outcome: found, first_violation: None, detail }
}

/// Objective-minimizing rate of `group` on a grid over [theta_min, 1].
fn optimal_rate(config: &MarketConfig, group: usize) -> Option<f64> {
    let lo = config.theta_min;
    (0..RATE_GRID)
        .filter_map(|k| {
            let v = lo + (1.0 - lo) * k as f64 / (RATE_GRID - 1) as f64;
            let c = apply_axis(config, SweepAxis::ThetaI, group, v).ok()?;
            let alloc = crate::allocation::solve_allocation(&c.point().ok()?).ok()?;
            let t = worst_case_tradeoff(&Mechanism::new(alloc)).ok()?.objective;
            Some((v, t))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|x| x.0)
}

fn sweep_point(
    config: &MarketConfig,
    req: &SweepRequest,
    base: Option<&Mechanism>,
    probe: f64,
    index: usize,
    v: f64,
) -> Result<SweepRow> {
    let i = req.group;
    let cfg = apply_axis(config, req.axis, i, v)?;
    let point = cfg.point()?;
    let dens = VirtualCostDensity::new(&point)?;
    let alloc = solve_allocation_with(&point, &dens)?;
    let low_budget = check_low_budget(&point, &dens)?;
    let mech = Mechanism::new(alloc);
    let breaks = mech.allocation.breakpoints(i);
    let group_payment = group_total(&point, i, &breaks, |c| mech.expected_payment(i, c));
    let individual_payment = mech.payment(probe, i)?;
    let (frozen_group_payment, frozen_individual_payment) = match base {
        Some(b) => {
            let br = b.allocation.breakpoints(i);
            let g = group_total(&point, i, &br, |c| frozen_expected_payment(b, &point, i, c));
            let a = b.allocation.eval(i, probe);
            (g, if a > 0.0 { frozen_expected_payment(b, &point, i, probe) / a } else { f64::NAN })
        }
        None => (f64::NAN, f64::NAN),
    };
    let objective = worst_case_tradeoff(&mech)?.objective;
    let t_star = if low_budget { Some(reduced_objective_unchecked(&point)?.t_star) } else { None };
    let optimal_rate = match req.axis {
        SweepAxis::AlphaIntra | SweepAxis::AlphaInter => optimal_rate(&cfg, i),
        _ => None,
    };
    Ok(SweepRow {
        index,
        value: v,
        error: None,
        structure: Some(mech.allocation.structure),
        case: Some(mech.allocation.case),
        low_budget,
        group_payment,
        individual_payment,
        frozen_group_payment,
        frozen_individual_payment,
        objective,
        t_star,
        optimal_rate,
    })
}

/// Runs the sweep. Failures at single points are recorded in their row and the sweep
/// continues; only an invalid request or base configuration is an error.
pub fn run_sweep(config: &MarketConfig, req: &SweepRequest) -> Result<SweepReport> {
    config.validate()?;
    req.validate(config)?;
    let i = req.group;
    let d = &config.groups[i].cost_dist;
    let probe = req.probe_cost.unwrap_or_else(|| d.quantile(0.5 * config.theta_min));
    if !(probe >= d.c_min() && probe <= d.quantile(config.theta_min)) {
        return Err(LeakError::Domain(format!(
            "probe cost {probe} must lie in [c_min, tau at theta_min] = [{}, {}]",
            d.c_min(),
            d.quantile(config.theta_min)
        )));
    }
    // The frozen allocation is the base configuration's; a budget sweep has no use for it.
    let base = match req.axis {
        SweepAxis::Budget => None,
        _ => crate::allocation::solve_allocation(&config.point()?).ok().map(Mechanism::new),
    };
    let rows: Vec<SweepRow> = req
        .values()
        .into_par_iter()
        .enumerate()
        .map(|(k, v)| sweep_point(config, req, base.as_ref(), probe, k, v).unwrap_or_else(|e| SweepRow::failed(k, v, &e)))
        .collect();

    let mut checks = Vec::new();
    match req.axis {
        SweepAxis::Budget => {
            let ascending = req.to > req.from;
            let mut t = finite_series(&rows, |r| r.t_star);
            if !ascending {
                t.reverse();
            }
            checks.push(assertion(4, "t_star", &t, "low-budget points, budget increasing"));
        }
        SweepAxis::AlphaIntra | SweepAxis::AlphaInter => {
            let mut pay = finite_series(&rows, |r| Some(r.frozen_individual_payment));
            let mut tot = finite_series(&rows, |r| Some(r.frozen_group_payment));
            if req.to < req.from {
                pay.reverse();
                tot.reverse();
            }
            if config.privacy_model.outsider_offset.is_some() {
                checks.push(assertion(2, "frozen_individual_payment", &pay, "allocation held fixed"));
                checks.push(assertion(2, "frozen_group_payment", &tot, "allocation held fixed"));
            } else {
                checks.push(PropertyCheck {
                    property: 2,
                    kind: CheckKind::NotApplicable,
                    column: "frozen_individual_payment".into(),
                    outcome: false,
                    first_violation: None,
                    detail: "h - g at the threshold grows with correlation under g = rho h; set privacy_model.outsider_offset".into(),
                });
            }
            let rate = finite_series(&rows, |r| r.optimal_rate);
            checks.push(exhibit(3, "optimal_rate", &rate, "objective-minimizing rate of the swept group"));
        }
        SweepAxis::ThetaI => {
            let frozen = finite_series(&rows, |r| Some(r.frozen_group_payment));
            checks.push(exhibit(1, "frozen_group_payment", &frozen, "allocation held fixed"));
            let resolved = finite_series(&rows, |r| Some(r.group_payment));
            checks.push(exhibit(1, "group_payment", &resolved, "mechanism re-solved"));
        }
    }
    Ok(SweepReport { axis: req.axis, group: i, probe_cost: probe, rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{low_budget_interval, solve_allocation};
    use crate::testkit::uniform_market;
    use approx::assert_relative_eq;

    #[test]
    fn frozen_payment_matches_mechanism_at_base() {
        let cfg = uniform_market();
        let m = Mechanism::new(solve_allocation(&cfg.point().unwrap()).unwrap());
        for i in 0..2 {
            let d = cfg.groups[i].cost_dist.clone();
            for t in [0.0, 0.3, 0.9] {
                let r = d.c_min() + t * (m.point().tau(i) - d.c_min());
                assert_relative_eq!(frozen_expected_payment(&m, m.point(), i, r), m.expected_payment(i, r), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn budget_sweep_is_monotone() {
        let mut cfg = uniform_market();
        let p = cfg.point().unwrap();
        let (lo, hi) = low_budget_interval(&p, &VirtualCostDensity::new(&p).unwrap());
        cfg.budget = 0.5 * (lo + hi);
        let req = SweepRequest::new(SweepAxis::Budget, lo + 0.05 * (hi - lo), lo + 0.95 * (hi - lo), 10);
        let rep = run_sweep(&cfg, &req).unwrap();
        assert!(rep.rows.iter().all(|r| r.low_budget && r.structure == Some(Structure::StrictlyDecreasing)));
        assert!(rep.passed(), "{:?}", rep.checks);
    }

    #[test]
    fn offset_family_payment_decreases_in_correlation() {
        let mut cfg = uniform_market();
        cfg.privacy_model.rho = 0.0;
        cfg.privacy_model.outsider_offset = Some(0.05);
        cfg.budget = 40.0;
        let req = SweepRequest::new(SweepAxis::AlphaIntra, 0.1, 0.6, 6);
        let rep = run_sweep(&cfg, &req).unwrap();
        assert_eq!(rep.failed_points(), 0, "{:?}", rep.rows);
        assert!(rep.passed(), "{:?}", rep.checks);
        assert!(rep.checks.iter().any(|c| c.property == 2 && c.kind == CheckKind::Assertion));
    }

    #[test]
    fn rho_family_reports_premise() {
        let mut cfg = uniform_market();
        cfg.budget = 40.0;
        let rep = run_sweep(&cfg, &SweepRequest::new(SweepAxis::AlphaInter, 0.0, 0.4, 3)).unwrap();
        assert!(rep.checks.iter().any(|c| c.property == 2 && c.kind == CheckKind::NotApplicable));
    }

    #[test]
    fn infeasible_points_are_recorded() {
        let mut cfg = uniform_market();
        cfg.budget = 40.0;
        let rep = run_sweep(&cfg, &SweepRequest::new(SweepAxis::Budget, 1e-3, 40.0, 4)).unwrap();
        assert!(rep.rows[0].error.is_some());
        assert!(rep.rows[3].error.is_none());
        assert!(run_sweep(&cfg, &SweepRequest::new(SweepAxis::Budget, 1.0, 2.0, 1)).is_err());
    }

    #[test]
    fn monotone_helpers() {
        assert_eq!(first_increase(&[(0, 3.0), (1, 2.0), (2, 2.5)]), Some(2));
        assert_eq!(first_increase(&[(0, 3.0), (1, 3.0)]), None);
        assert!(is_non_monotone(&[1.0, 2.0, 1.5]));
        assert!(!is_non_monotone(&[1.0, 2.0, 2.0, 3.0]));
    }
}
