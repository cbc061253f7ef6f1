//! Cost distributions on a bounded interval.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{config_err, LeakError, Result};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Uniform,
    /// Exponential with the given rate, truncated to the support.
    TruncatedExponential { rate: f64 },
    /// Beta(a, b) rescaled to the support.
    Beta { a: f64, b: f64 },
}

/// Marginal distribution of an agent's cost within one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCostDist", into = "RawCostDist")]
pub struct CostDistribution {
    family: Family,
    c_min: f64,
    c_max: f64,
    /// log of the beta normalizer, cached for the beta family
    ln_beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCostDist {
    family: String,
    c_min: f64,
    c_max: f64,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

impl TryFrom<RawCostDist> for CostDistribution {
    type Error = LeakError;
    fn try_from(raw: RawCostDist) -> Result<Self> {
        let param = |k: &str| {
            raw.params
                .get(k)
                .copied()
                .ok_or_else(|| config_err(format!("cost_dist.params.{k}"), "missing parameter"))
        };
        let family = match raw.family.as_str() {
            "uniform" => Family::Uniform,
            "truncated-exponential" => Family::TruncatedExponential { rate: param("rate")? },
            "beta-on-interval" => Family::Beta { a: param("a")?, b: param("b")? },
            other => return Err(config_err("cost_dist.family", format!("unknown family `{other}`"))),
        };
        CostDistribution::new(family, raw.c_min, raw.c_max)
    }
}

impl From<CostDistribution> for RawCostDist {
    fn from(d: CostDistribution) -> Self {
        let mut params = BTreeMap::new();
        let family = match d.family {
            Family::Uniform => "uniform",
            Family::TruncatedExponential { rate } => {
                params.insert("rate".to_string(), rate);
                "truncated-exponential"
            }
            Family::Beta { a, b } => {
                params.insert("a".to_string(), a);
                params.insert("b".to_string(), b);
                "beta-on-interval"
            }
        };
        RawCostDist { family: family.to_string(), c_min: d.c_min, c_max: d.c_max, params }
    }
}

impl CostDistribution {
    /// Builds a distribution on `[c_min, c_max]`.
    ///
    /// `c_min = 0` is accepted: several textbook cases live on [0, 1], and the virtual
    /// cost is still positive on the open interval.
    pub fn new(family: Family, c_min: f64, c_max: f64) -> Result<Self> {
        if !(c_min.is_finite() && c_max.is_finite()) || c_min < 0.0 || c_min >= c_max {
            return Err(config_err("cost_dist", format!("need 0 <= c_min < c_max, got [{c_min}, {c_max}]")));
        }
        let mut ln_beta = 0.0;
        match family {
            Family::Uniform => {}
            Family::TruncatedExponential { rate } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(config_err("cost_dist.params.rate", "rate must be finite and > 0"));
                }
            }
            Family::Beta { a, b } => {
                if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                    return Err(config_err("cost_dist.params", "beta shape parameters must be > 0"));
                }
                use statrs::function::gamma::ln_gamma;
                ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
            }
        }
        Ok(Self { family, c_min, c_max, ln_beta })
    }

    pub fn uniform(c_min: f64, c_max: f64) -> Result<Self> {
        Self::new(Family::Uniform, c_min, c_max)
    }

    pub fn truncated_exponential(rate: f64, c_min: f64, c_max: f64) -> Result<Self> {
        Self::new(Family::TruncatedExponential { rate }, c_min, c_max)
    }

    pub fn beta(a: f64, b: f64, c_min: f64, c_max: f64) -> Result<Self> {
        Self::new(Family::Beta { a, b }, c_min, c_max)
    }

    pub fn family(&self) -> Family {
        self.family
    }
    pub fn c_min(&self) -> f64 {
        self.c_min
    }
    pub fn c_max(&self) -> f64 {
        self.c_max
    }
    pub fn width(&self) -> f64 {
        self.c_max - self.c_min
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.c_min && c <= self.c_max
    }

    pub fn pdf(&self, c: f64) -> f64 {
        if !self.contains(c) {
            return 0.0;
        }
        let w = self.width();
        let x = c - self.c_min;
        match self.family {
            Family::Uniform => 1.0 / w,
            Family::TruncatedExponential { rate } => rate * (-rate * x).exp() / -(-rate * w).exp_m1(),
            Family::Beta { a, b } => {
                let u = x / w;
                (xlogy(a - 1.0, u) + xlogy(b - 1.0, 1.0 - u) - self.ln_beta).exp() / w
            }
        }
    }

    /// Derivative of the density, analytic per family.
    pub fn pdf_deriv(&self, c: f64) -> f64 {
        if !self.contains(c) {
            return 0.0;
        }
        match self.family {
            Family::Uniform => 0.0,
            Family::TruncatedExponential { rate } => -rate * self.pdf(c),
            Family::Beta { a, b } => {
                let w = self.width();
                let u = (c - self.c_min) / w;
                self.pdf(c) * ((a - 1.0) / u - (b - 1.0) / (1.0 - u)) / w
            }
        }
    }

    pub fn cdf(&self, c: f64) -> f64 {
        if c <= self.c_min {
            return 0.0;
        }
        if c >= self.c_max {
            return 1.0;
        }
        let w = self.width();
        let x = c - self.c_min;
        match self.family {
            Family::Uniform => x / w,
            Family::TruncatedExponential { rate } => (-rate * x).exp_m1() / (-rate * w).exp_m1(),
            Family::Beta { a, b } => statrs::function::beta::beta_reg(a, b, x / w),
        }
    }

    /// Inverse of the cdf on [0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return self.c_min;
        }
        if u >= 1.0 {
            return self.c_max;
        }
        let w = self.width();
        match self.family {
            Family::Uniform => self.c_min + u * w,
            Family::TruncatedExponential { rate } => {
                let x = -(u * (-rate * w).exp_m1()).ln_1p() / rate;
                (self.c_min + x).clamp(self.c_min, self.c_max)
            }
            Family::Beta { .. } => quad::bisect(|c| self.cdf(c) - u, self.c_min, self.c_max, 1e-15 * w),
        }
    }

    /// F(c)/f(c), the inverse hazard term of the virtual cost. Zero at `c_min`.
    pub fn cdf_over_pdf(&self, c: f64) -> Result<f64> {
        if !self.contains(c) {
            return Err(LeakError::Domain(format!("cost {c} outside [{}, {}]", self.c_min, self.c_max)));
        }
        let big_f = self.cdf(c);
        if big_f == 0.0 {
            return Ok(0.0);
        }
        let f = self.pdf(c);
        if !(f > 0.0) {
            return Err(LeakError::Domain(format!("density vanishes at c = {c}")));
        }
        Ok(big_f / f)
    }
}

/// k * ln(v) with the convention 0 * ln(0) = 0.
fn xlogy(k: f64, v: f64) -> f64 {
    if k == 0.0 {
        0.0
    } else {
        k * v.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn families() -> Vec<CostDistribution> {
        vec![
            CostDistribution::uniform(0.5, 1.5).unwrap(),
            CostDistribution::truncated_exponential(1.3, 0.2, 2.0).unwrap(),
            CostDistribution::beta(2.0, 2.0, 0.1, 1.1).unwrap(),
            CostDistribution::beta(0.7, 1.5, 0.3, 1.0).unwrap(),
        ]
    }

    #[test]
    fn pdf_integrates_to_cdf() {
        for d in families() {
            for &t in &[0.1, 0.5, 0.9] {
                let c = d.c_min() + t * d.width();
                let mass = quad::integrate(|x| d.pdf(x), d.c_min(), c, 1e-12);
                assert_relative_eq!(mass, d.cdf(c), max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for d in families() {
            let c = d.c_min() + 0.37 * d.width();
            let h = 1e-6 * d.width();
            let fd = (d.pdf(c + h) - d.pdf(c - h)) / (2.0 * h);
            assert_relative_eq!(d.pdf_deriv(c), fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn truncated_exponential_median_example() {
        let d = CostDistribution::truncated_exponential(1.0, 0.0, 1.0).unwrap();
        let tau = d.quantile(0.5);
        let expected = -(1.0 - 0.5 * (1.0 - (-1f64).exp())).ln();
        assert_relative_eq!(tau, expected, epsilon = 1e-14);
        assert!((tau - 0.3799).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_support() {
        assert!(CostDistribution::uniform(1.0, 1.0).is_err());
        assert!(CostDistribution::uniform(-0.1, 1.0).is_err());
        assert!(CostDistribution::truncated_exponential(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        for d in families() {
            let s = serde_json::to_string(&d).unwrap();
            let back: CostDistribution = serde_json::from_str(&s).unwrap();
            assert_eq!(back, d);
        }
    }
}
