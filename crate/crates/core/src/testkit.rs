//! Ready-made markets for examples, tests and benchmarks.

use rand::Rng;

use crate::allocation::{budget_residual_unchecked, low_budget_interval};
use crate::dist::CostDistribution;
use crate::market::{CorrelationStrength, DataLink, GroupSpec, MarketConfig, MarketPoint, PrivacyCostModel};
use crate::virtual_cost::VirtualCostDensity;

/// Two uniform groups with moderate leakage; solves to an FtD rule.
pub fn uniform_market() -> MarketConfig {
    MarketConfig {
        population_size: 100,
        budget: 20.0,
        gamma: 0.5,
        theta_min: 0.2,
        privacy_model: PrivacyCostModel { b_cap: 0.9, rho: 0.5, benefit_intercept: 0.01, benefit_slope: 0.02, outsider_offset: None },
        groups: vec![
            GroupSpec {
                mass: 0.6,
                cost_dist: CostDistribution::uniform(0.5, 1.5).unwrap(),
                correlation: CorrelationStrength { intra: 0.3, inter: 0.2 },
                data_link: DataLink { p0: 0.2, slope: 0.5 },
            },
            GroupSpec {
                mass: 0.4,
                cost_dist: CostDistribution::uniform(0.4, 1.2).unwrap(),
                correlation: CorrelationStrength { intra: 0.2, inter: 0.1 },
                data_link: DataLink { p0: 0.4, slope: 0.3 },
            },
        ],
        epsilon: 0.0,
        participation: Some(vec![0.6, 0.8]),
    }
}

/// One-group market with a fixed leakage coefficient (intra strength = b at full rate).
pub fn single_group(dist: CostDistribution, b: f64, rate: f64) -> MarketPoint {
    let cfg = MarketConfig {
        population_size: 100,
        budget: 1.0,
        gamma: 0.5,
        theta_min: 0.01,
        privacy_model: PrivacyCostModel { b_cap: 0.9, ..Default::default() },
        groups: vec![GroupSpec {
            mass: 1.0,
            cost_dist: dist,
            correlation: CorrelationStrength { intra: if rate > 0.0 { b / rate } else { 0.0 }, inter: 0.0 },
            data_link: DataLink { p0: 0.5, slope: 0.0 },
        }],
        epsilon: 0.0,
        participation: Some(vec![rate]),
    };
    cfg.point().unwrap()
}

/// Random regular cost distribution on a random support.
pub fn random_dist<R: Rng>(rng: &mut R) -> CostDistribution {
    let c_min = rng.gen_range(0.1..1.0);
    let c_max = c_min + rng.gen_range(0.3..2.0);
    match rng.gen_range(0..3) {
        0 => CostDistribution::uniform(c_min, c_max).unwrap(),
        1 => CostDistribution::truncated_exponential(rng.gen_range(0.2..3.0), c_min, c_max).unwrap(),
        _ => CostDistribution::beta(rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), c_min, c_max).unwrap(),
    }
}

/// Random market with 1 to `max_groups` groups.
///
/// Budgets are drawn relative to the cost scale, so every solver regime shows up.
/// Participation rates stay below 1 so beta densities never put the threshold on a
/// zero of the density.
pub fn random_market<R: Rng>(rng: &mut R, max_groups: usize) -> MarketConfig {
    let k = rng.gen_range(1..=max_groups);
    let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let tot: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= tot);
    let fix: f64 = 1.0 - w[..k - 1].iter().sum::<f64>();
    w[k - 1] = fix;
    let groups = w
        .iter()
        .map(|&mass| GroupSpec {
            mass,
            cost_dist: random_dist(rng),
            correlation: CorrelationStrength { intra: rng.gen_range(0.0..0.5), inter: rng.gen_range(0.0..0.3) },
            data_link: DataLink { p0: rng.gen_range(0.0..0.5), slope: rng.gen_range(0.0..0.5) },
        })
        .collect();
    let s = [50u64, 100, 500][rng.gen_range(0..3)];
    MarketConfig {
        population_size: s,
        budget: 1.0,
        gamma: rng.gen_range(0.05..1.0),
        theta_min: 0.2,
        privacy_model: PrivacyCostModel {
            b_cap: 0.9,
            rho: rng.gen_range(0.0..0.9),
            benefit_intercept: rng.gen_range(0.0..0.02),
            benefit_slope: rng.gen_range(0.0..0.02),
            outsider_offset: None,
        },
        groups,
        epsilon: 0.0,
        participation: Some((0..k).map(|_| rng.gen_range(0.3..0.95)).collect()),
    }
}

/// Sets the budget so that B/s - l is `frac` of the spend needed to select every
/// participant (sum_i q_i int phi_i f_i). Fractions in (0, 1) leave a non-trivial problem.
pub fn with_budget_fraction(config: &MarketConfig, frac: f64) -> MarketConfig {
    let p = config.point().expect("valid config");
    let dens = VirtualCostDensity::new(&p).expect("regular config");
    let full = dens.integrate(|x| x, dens.phi_min, dens.phi_max);
    let l = budget_residual_unchecked(&p).value;
    let mut c = config.clone();
    c.budget = c.population_size as f64 * (l + frac * full);
    c
}

/// Sets the budget at position `frac` in (0, 1) of the low-budget interval.
pub fn with_low_budget(config: &MarketConfig, frac: f64) -> MarketConfig {
    let p = config.point().expect("valid config");
    let dens = VirtualCostDensity::new(&p).expect("regular config");
    let (lo, hi) = low_budget_interval(&p, &dens);
    let mut c = config.clone();
    c.budget = lo + frac * (hi - lo);
    c
}
