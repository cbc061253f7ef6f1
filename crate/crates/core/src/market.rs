//! Market instance: groups, privacy-cost families, participation profiles.

use serde::{Deserialize, Serialize};

use crate::dist::CostDistribution;
use crate::error::{config_err, LeakError, Result};

/// Group-level correlation strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStrength {
    pub intra: f64,
    pub inter: f64,
}

/// Data-cost link p_i(c) = clamp(p0 + slope * (c - c_min)/(c_max - c_min), 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataLink {
    pub p0: f64,
    pub slope: f64,
}

impl DataLink {
    pub fn eval(&self, dist: &CostDistribution, c: f64) -> f64 {
        (self.p0 + self.slope * (c - dist.c_min()) / dist.width()).clamp(0.0, 1.0)
    }
}

/// Privacy costs and participation benefit.
///
/// `h = c * b`, with `b = min(b_cap, intra * theta_i + inter * theta_{-i})`.
/// Outsiders pay `g = rho * h`, or `g = max(0, h - kappa * c)` when `outsider_offset`
/// carries a kappa. Benefit is `w(theta_bar) = benefit_intercept + benefit_slope * theta_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyCostModel {
    #[serde(default = "default_b_cap")]
    pub b_cap: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub benefit_intercept: f64,
    #[serde(default)]
    pub benefit_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outsider_offset: Option<f64>,
}

fn default_b_cap() -> f64 {
    0.9
}

impl Default for PrivacyCostModel {
    fn default() -> Self {
        Self { b_cap: 0.9, rho: 0.0, benefit_intercept: 0.0, benefit_slope: 0.0, outsider_offset: None }
    }
}

impl PrivacyCostModel {
    pub fn validate(&self) -> Result<()> {
        let p = "privacy_model";
        if !(self.b_cap > 0.0 && self.b_cap < 1.0) {
            return Err(config_err(format!("{p}.b_cap"), "must lie in (0, 1)"));
        }
        // rho = 1 is allowed: it is the g = h boundary used by several closed-form checks,
        // and validate_assumptions flags the lost strictness of h - g.
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config_err(format!("{p}.rho"), "must lie in [0, 1]"));
        }
        if !(self.benefit_intercept >= 0.0 && self.benefit_intercept.is_finite()) {
            return Err(config_err(format!("{p}.benefit_intercept"), "must be finite and >= 0"));
        }
        if !(self.benefit_slope >= 0.0 && self.benefit_slope.is_finite()) {
            return Err(config_err(format!("{p}.benefit_slope"), "must be finite and >= 0"));
        }
        if let Some(k) = self.outsider_offset {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(config_err(format!("{p}.outsider_offset"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Leakage coefficient b for raw rates and strengths.
    pub fn leakage(&self, alpha: CorrelationStrength, theta_i: f64, theta_minus: f64) -> f64 {
        (alpha.intra * theta_i + alpha.inter * theta_minus).min(self.b_cap)
    }

    /// Participant privacy cost h = c b.
    pub fn h(&self, c: f64, b: f64) -> f64 {
        c * b
    }

    /// Outsider privacy cost g.
    pub fn g(&self, c: f64, b: f64) -> f64 {
        match self.outsider_offset {
            None => self.rho * c * b,
            Some(kappa) => (c * b - kappa * c).max(0.0),
        }
    }

    pub fn benefit(&self, theta_bar: f64) -> f64 {
        self.benefit_intercept + self.benefit_slope * theta_bar
    }

    /// dw/d(theta_bar).
    pub fn benefit_slope(&self) -> f64 {
        self.benefit_slope
    }
}

/// One correlated group of agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub mass: f64,
    pub cost_dist: CostDistribution,
    pub correlation: CorrelationStrength,
    pub data_link: DataLink,
}

/// A full market instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub population_size: u64,
    pub budget: f64,
    pub gamma: f64,
    pub theta_min: f64,
    pub privacy_model: PrivacyCostModel,
    pub groups: Vec<GroupSpec>,
    /// Selection probability offered to non-participants.
    #[serde(default)]
    pub epsilon: f64,
    /// Equilibrium participation rates the mechanism targets; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participation: Option<Vec<f64>>,
}

impl MarketConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: MarketConfig = serde_json::from_str(s).map_err(|e| {
            let path = if e.is_data() { "<schema>" } else { "<syntax>" };
            config_err(path, format!("{e} (line {}, column {})", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 1 {
            return Err(config_err("population_size", "must be >= 1"));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(config_err("budget", "must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err("gamma", "must lie in [0, 1]"));
        }
        if !(self.theta_min > 0.0 && self.theta_min <= 1.0) {
            return Err(config_err("theta_min", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config_err("epsilon", "must lie in [0, 1]"));
        }
        self.privacy_model.validate()?;
        if self.groups.is_empty() {
            return Err(config_err("groups", "at least one group is required"));
        }
        let mut total = 0.0;
        for (i, g) in self.groups.iter().enumerate() {
            if !(g.mass > 0.0 && g.mass <= 1.0) {
                return Err(config_err(format!("groups[{i}].mass"), "must lie in (0, 1]"));
            }
            let a = g.correlation;
            if !(a.intra >= 0.0 && a.intra.is_finite() && a.inter >= 0.0 && a.inter.is_finite()) {
                return Err(config_err(format!("groups[{i}].correlation"), "strengths must be finite and >= 0"));
            }
            if !(g.data_link.p0.is_finite() && g.data_link.slope.is_finite()) {
                return Err(config_err(format!("groups[{i}].data_link"), "must be finite"));
            }
            total += g.mass;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(config_err("groups[].mass", format!("masses sum to {total}, expected 1")));
        }
        if let Some(rates) = &self.participation {
            if rates.len() != self.groups.len() {
                return Err(config_err("participation", "one rate per group is required"));
            }
            for (i, &r) in rates.iter().enumerate() {
                if !(r >= self.theta_min && r <= 1.0) {
                    return Err(config_err(format!("participation[{i}]"), "must lie in [theta_min, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Per-capita budget B/s.
    pub fn budget_per_capita(&self) -> f64 {
        self.budget / self.population_size as f64
    }

    pub fn profile(&self) -> Result<ParticipationProfile> {
        let rates = self.participation.clone().unwrap_or_else(|| vec![1.0; self.groups.len()]);
        ParticipationProfile::new(self, rates)
    }

    /// The market evaluated at its configured profile.
    pub fn point(&self) -> Result<MarketPoint> {
        MarketPoint::new(self.clone(), self.profile()?)
    }
}

/// Per-group equilibrium participation rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationProfile {
    pub rates: Vec<f64>,
    pub theta_bar: f64,
    pub thresholds: Vec<f64>,
}

impl ParticipationProfile {
    pub fn new(config: &MarketConfig, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != config.groups.len() {
            return Err(config_err("participation", "one rate per group is required"));
        }
        for (i, &r) in rates.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) || r < config.theta_min {
                return Err(config_err(format!("participation[{i}]"), format!("rate {r} outside [theta_min, 1]")));
            }
        }
        let theta_bar = config.groups.iter().zip(&rates).map(|(g, r)| g.mass * r).sum();
        let thresholds = config.groups.iter().zip(&rates).map(|(g, &r)| g.cost_dist.quantile(r)).collect();
        Ok(Self { rates, theta_bar, thresholds })
    }

    /// Mass-weighted average rate of the groups other than `i` (0 for a single group).
    pub fn theta_minus(&self, config: &MarketConfig, i: usize) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, g) in config.groups.iter().enumerate() {
            if j != i {
                num += g.mass * self.rates[j];
                den += g.mass;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

/// A market together with an equilibrium profile and the quantities it pins down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPoint {
    pub config: MarketConfig,
    pub profile: ParticipationProfile,
    /// Leakage coefficient per group.
    pub leakage: Vec<f64>,
}

impl MarketPoint {
    pub fn new(config: MarketConfig, profile: ParticipationProfile) -> Result<Self> {
        let leakage = (0..config.groups.len())
            .map(|i| {
                let g = &config.groups[i];
                config.privacy_model.leakage(g.correlation, profile.rates[i], profile.theta_minus(&config, i))
            })
            .collect();
        Ok(Self { config, profile, leakage })
    }

    pub fn with_rates(&self, rates: Vec<f64>) -> Result<Self> {
        let profile = ParticipationProfile::new(&self.config, rates)?;
        Self::new(self.config.clone(), profile)
    }

    pub fn num_groups(&self) -> usize {
        self.config.groups.len()
    }
    pub fn dist(&self, i: usize) -> &CostDistribution {
        &self.config.groups[i].cost_dist
    }
    pub fn mass(&self, i: usize) -> f64 {
        self.config.groups[i].mass
    }
    pub fn rate(&self, i: usize) -> f64 {
        self.profile.rates[i]
    }
    pub fn tau(&self, i: usize) -> f64 {
        self.profile.thresholds[i]
    }
    pub fn theta_bar(&self) -> f64 {
        self.profile.theta_bar
    }
    pub fn b(&self, i: usize) -> f64 {
        self.leakage[i]
    }
    pub fn model(&self) -> &PrivacyCostModel {
        &self.config.privacy_model
    }

    fn check_support(&self, i: usize, c: f64) -> Result<()> {
        let d = self.dist(i);
        if d.contains(c) {
            Ok(())
        } else {
            Err(LeakError::Domain(format!("cost {c} outside group {i} support [{}, {}]", d.c_min(), d.c_max())))
        }
    }

    /// Participant privacy cost h(c).
    pub fn privacy_cost_participant(&self, i: usize, c: f64) -> Result<f64> {
        self.check_support(i, c)?;
        Ok(self.model().h(c, self.b(i)))
    }

    /// Non-participant privacy cost g(c).
    pub fn privacy_cost_outsider(&self, i: usize, c: f64) -> Result<f64> {
        self.check_support(i, c)?;
        Ok(self.model().g(c, self.b(i)))
    }

    /// Unchecked h, for inner loops.
    pub fn h(&self, i: usize, c: f64) -> f64 {
        self.model().h(c, self.b(i))
    }

    /// Unchecked g, for inner loops.
    pub fn g(&self, i: usize, c: f64) -> f64 {
        self.model().g(c, self.b(i))
    }

    /// Participation benefit at the profile's average rate.
    pub fn benefit(&self) -> f64 {
        self.model().benefit(self.theta_bar())
    }

    /// h(tau_i) - g(tau_i).
    pub fn threshold_gap(&self, i: usize) -> f64 {
        let t = self.tau(i);
        self.h(i, t) - self.g(i, t)
    }
}

/// One failed assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub group: usize,
    /// (c, theta_i, theta_minus, intra, inter) at the violating grid point.
    pub point: [f64; 5],
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

/// Grid checks of the boundedness and monotonicity assumptions on h, g and p_i.
///
/// Reports the first violating point for each (check, group) pair.
pub fn validate_assumptions(config: &MarketConfig) -> ValidationReport {
    const NC: usize = 200;
    const NT: usize = 20;
    let m = &config.privacy_model;
    let mut violations: Vec<Violation> = Vec::new();
    let mut push = |check: &str, group: usize, point: [f64; 5], detail: String| {
        if !violations.iter().any(|v| v.check == check && v.group == group) {
            violations.push(Violation { check: check.to_string(), group, point, detail });
        }
    };
    let tol = 1e-12;
    for (gi, grp) in config.groups.iter().enumerate() {
        let d = &grp.cost_dist;
        let a = grp.correlation;
        let costs: Vec<f64> = (0..NC).map(|k| d.c_min() + d.width() * k as f64 / (NC - 1) as f64).collect();
        let rates: Vec<f64> = (0..NT).map(|k| k as f64 / (NT - 1) as f64).collect();
        let bumped = |s: f64| if s > 0.0 { 1.25 * s } else { 0.1 };
        for &ti in &rates {
            for &tm in &rates {
                let b = m.leakage(a, ti, tm);
                let b_up = [
                    m.leakage(a, (ti + 0.05).min(1.0), tm),
                    m.leakage(a, ti, (tm + 0.05).min(1.0)),
                    m.leakage(CorrelationStrength { intra: bumped(a.intra), inter: a.inter }, ti, tm),
                    m.leakage(CorrelationStrength { intra: a.intra, inter: bumped(a.inter) }, ti, tm),
                ];
                if !(0.0..1.0).contains(&b) {
                    push("leakage_range", gi, [f64::NAN, ti, tm, a.intra, a.inter], format!("b = {b}"));
                }
                for (k, &c) in costs.iter().enumerate() {
                    let pt = [c, ti, tm, a.intra, a.inter];
                    let (h, g) = (m.h(c, b), m.g(c, b));
                    if !(g >= -tol && g <= h + tol && h <= c + tol) {
                        push("bounded", gi, pt, format!("need 0 <= g <= h <= c, got g={g}, h={h}"));
                    }
                    for &bu in &b_up {
                        if m.h(c, bu) < h - tol || m.g(c, bu) < g - tol {
                            push("monotone_in_rates_and_strengths", gi, pt, format!("h or g decreases when b goes {b} -> {bu}"));
                        }
                    }
                    if k + 1 < NC {
                        let c2 = costs[k + 1];
                        if m.h(c2, b) < h - tol || m.g(c2, b) < g - tol {
                            push("monotone_in_cost", gi, pt, "h or g decreases in c".to_string());
                        }
                        if b > 0.0 && !(m.h(c2, b) - m.g(c2, b) > h - g) {
                            push("gap_strictly_increasing", gi, pt, format!("h - g not strictly increasing at b = {b}"));
                        }
                    }
                }
            }
        }
        for k in 0..NC - 1 {
            let (p1, p2) = (grp.data_link.eval(d, costs[k]), grp.data_link.eval(d, costs[k + 1]));
            if p2 < p1 - tol {
                push("data_link_monotone", gi, [costs[k], f64::NAN, f64::NAN, a.intra, a.inter], format!("p decreases {p1} -> {p2}"));
                break;
            }
        }
    }
    ValidationReport { passed: violations.is_empty(), violations }
}
