//! Monte Carlo playout of the market: sampling agents, joining, selection, payment and the
//! Horvitz-Thompson estimate.
//!
//! Every agent owns one ChaCha8 block (16 words) addressed by (seed, stream, agent), so a
//! replication's draws do not depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{CostDistribution, Family};
use crate::error::{LeakError, Result};
use crate::payment::{participation_audit, Mechanism};
use crate::tradeoff::AdversaryProfile;

/// Words of the ChaCha stream reserved per agent.
const WORDS_PER_AGENT: u128 = 16;
/// Offset of the selection draw inside an agent's block.
const SELECTION_WORD: u128 = 6;
/// Stream tags separating the three experiment kinds.
const STREAM_POPULATION: u64 = 0;
const STREAM_FIXED_N: u64 = 1;
const STREAM_JOIN: u64 = 2;

/// Data of agents who stay out, for bias experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonParticipantData {
    /// x = 1, the worst case for the bias.
    #[default]
    Adversarial,
    /// x drawn from the adversary profile continued above the threshold.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub non_participant: NonParticipantData,
    /// Evaluate payments for selected agents.
    pub record_payments: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { non_participant: NonParticipantData::Adversarial, record_payments: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSample {
    pub group: usize,
    pub cost: f64,
    pub x: bool,
    pub joined: bool,
    pub selected: bool,
    pub payment: f64,
}

fn agent_rng(seed: u64, stream: u64, replication: u64, agent: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replication << 2) | stream);
    rng.set_word_pos(agent as u128 * WORDS_PER_AGENT);
    rng
}

/// Inverse-cdf sampler; beta quantiles come from a table refined by Newton steps.
#[derive(Debug, Clone)]
struct CostSampler {
    dist: CostDistribution,
    table: Vec<f64>,
}

const TABLE_CELLS: usize = 4096;

impl CostSampler {
    fn new(dist: &CostDistribution) -> Self {
        let table = match dist.family() {
            Family::Beta { .. } => (0..=TABLE_CELLS).map(|k| dist.quantile(k as f64 / TABLE_CELLS as f64)).collect(),
            _ => Vec::new(),
        };
        Self { dist: dist.clone(), table }
    }

    fn quantile(&self, u: f64) -> f64 {
        if self.table.is_empty() {
            return self.dist.quantile(u);
        }
        let pos = u * TABLE_CELLS as f64;
        let k = (pos as usize).min(TABLE_CELLS - 1);
        let (mut lo, mut hi) = (self.table[k], self.table[k + 1]);
        let mut c = lo + (hi - lo) * (pos - k as f64);
        // Newton inside the table bracket, falling back to bisection when a step leaves it.
        for _ in 0..60 {
            let r = self.dist.cdf(c) - u;
            if r.abs() <= 1e-14 * u.max(1e-300) || hi - lo <= 1e-15 * hi.abs().max(1.0) {
                break;
            }
            if r > 0.0 {
                hi = c;
            } else {
                lo = c;
            }
            let f = self.dist.pdf(c);
            let step = c - r / f;
            c = if f > 0.0 && f.is_finite() && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        }
        c
    }
}

struct Samplers {
    costs: Vec<CostSampler>,
    cumulative_mass: Vec<f64>,
}

impl Samplers {
    fn new(mech: &Mechanism) -> Self {
        let p = mech.point();
        let costs = (0..p.num_groups()).map(|i| CostSampler::new(p.dist(i))).collect();
        let mut acc = 0.0;
        let cumulative_mass = (0..p.num_groups())
            .map(|i| {
                acc += p.mass(i);
                acc
            })
            .collect();
        Self { costs, cumulative_mass }
    }

    fn group(&self, u: f64) -> usize {
        let n = self.cumulative_mass.len();
        self.cumulative_mass.iter().position(|&m| u < m).unwrap_or(n - 1)
    }
}

fn draw_agent(mech: &Mechanism, adv: &AdversaryProfile, smp: &Samplers, rng: &mut ChaCha8Rng, opts: &SimOptions) -> AgentSample {
    let p = mech.point();
    let group = smp.group(rng.gen::<f64>());
    let cost = smp.costs[group].quantile(rng.gen::<f64>());
    let ux: f64 = rng.gen();
    let participant = cost <= p.tau(group);
    let x = if !participant && opts.non_participant == NonParticipantData::Adversarial {
        true
    } else {
        ux < adv.eval(&mech.allocation, group, cost)
    };
    AgentSample { group, cost, x, joined: false, selected: false, payment: 0.0 }
}

/// s agents before any decision: group ~ q, cost ~ f_i, x ~ Bernoulli(p_i(c)).
pub fn sample_population(
    mech: &Mechanism,
    adv: &AdversaryProfile,
    seed: u64,
    replication: u64,
    opts: &SimOptions,
) -> Vec<AgentSample> {
    let smp = Samplers::new(mech);
    sample_with(mech, adv, &smp, seed, replication, opts)
}

fn sample_with(
    mech: &Mechanism,
    adv: &AdversaryProfile,
    smp: &Samplers,
    seed: u64,
    replication: u64,
    opts: &SimOptions,
) -> Vec<AgentSample> {
    let s = mech.point().config.population_size;
    (0..s)
        .map(|k| {
            let mut rng = agent_rng(seed, STREAM_POPULATION, replication, k);
            draw_agent(mech, adv, smp, &mut rng, opts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    /// Horvitz-Thompson estimate.
    pub estimate: f64,
    /// Mean of x over the whole population.
    pub true_mean: f64,
    /// Mean of x over participants.
    pub participant_mean: f64,
    pub participants: usize,
    pub spend: f64,
    pub joins: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Join (c <= tau_i), truthful report, selection with probability A_i(c), payment and
/// the estimate mu = (1/N) sum_{participants} x 1{selected} / A_i(c).
pub fn run_replication(
    population: &mut [AgentSample],
    mech: &Mechanism,
    seed: u64,
    replication: u64,
    opts: &SimOptions,
) -> Result<ReplicationOutcome> {
    let p = mech.point();
    let n = p.num_groups();
    let mut joins = vec![0; n];
    let mut counts = vec![0; n];
    let (mut ht, mut xs_all, mut xs_part, mut spend) = (0.0, 0.0, 0.0, 0.0);
    let mut participants = 0;
    for (k, a) in population.iter_mut().enumerate() {
        counts[a.group] += 1;
        xs_all += a.x as u8 as f64;
        a.joined = a.cost <= p.tau(a.group);
        if !a.joined {
            continue;
        }
        participants += 1;
        joins[a.group] += 1;
        xs_part += a.x as u8 as f64;
        let mut rng = agent_rng(seed, STREAM_POPULATION, replication, k as u64);
        rng.set_word_pos(k as u128 * WORDS_PER_AGENT + SELECTION_WORD);
        let prob = mech.allocation.eval(a.group, a.cost);
        a.selected = rng.gen::<f64>() < prob;
        if a.selected {
            if a.x {
                ht += 1.0 / prob;
            }
            if opts.record_payments {
                a.payment = mech.payment(a.cost, a.group)?;
                spend += a.payment;
            }
        }
    }
    if participants == 0 {
        return Err(LeakError::EmptyMarket { replication });
    }
    let nf = participants as f64;
    Ok(ReplicationOutcome {
        estimate: ht / nf,
        true_mean: xs_all / population.len() as f64,
        participant_mean: xs_part / nf,
        participants,
        spend,
        joins,
        counts,
    })
}

/// Mean, sample variance and standard errors of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let variance = m2 * n / (n - 1.0);
        Self { mean, variance, mean_se: (variance / n).sqrt(), variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt() }
    }
}

/// Statistics with the participant count held at N = round(s theta), participants drawn
/// i.i.d. from the participant distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedNStats {
    pub participants: usize,
    pub estimate: Moments,
    /// Estimate minus the participants' own mean.
    pub ht_error: Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replications: usize,
    pub seed: u64,
    pub mean_estimate: f64,
    /// Variance of the estimate over fresh populations (binomial N).
    pub variance: f64,
    pub participant_mean: f64,
    pub true_mean: f64,
    /// Mean of (population mean - estimate).
    pub bias: Moments,
    /// Mean of (estimate - participant mean).
    pub ht_error: Moments,
    pub total_payment: Moments,
    pub join_rates: Vec<f64>,
    pub fixed_n: FixedNStats,
}

fn fixed_n_replication(mech: &Mechanism, adv: &AdversaryProfile, smp: &Samplers, n: usize, seed: u64, rep: u64) -> (f64, f64) {
    let p = mech.point();
    let th = p.theta_bar();
    let mut cum = Vec::with_capacity(p.num_groups());
    let mut acc = 0.0;
    for i in 0..p.num_groups() {
        acc += p.mass(i) * p.rate(i) / th;
        cum.push(acc);
    }
    let (mut ht, mut xs) = (0.0, 0.0);
    for k in 0..n {
        let mut rng = agent_rng(seed, STREAM_FIXED_N, rep, k as u64);
        let ug: f64 = rng.gen();
        let i = cum.iter().position(|&m| ug < m).unwrap_or(cum.len() - 1);
        let c = smp.costs[i].quantile(rng.gen::<f64>() * p.rate(i)).min(p.tau(i));
        let x = rng.gen::<f64>() < adv.eval(&mech.allocation, i, c);
        let prob = mech.allocation.eval(i, c);
        let sel = rng.gen::<f64>() < prob;
        if x {
            xs += 1.0;
            if sel {
                ht += 1.0 / prob;
            }
        }
    }
    (ht / n as f64, xs / n as f64)
}

/// Bias, variance and spend over `replications` independent markets, plus the
/// fixed-N experiment whose variance is comparable with the closed form.
pub fn estimate_bias_variance(
    mech: &Mechanism,
    adv: &AdversaryProfile,
    replications: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimulationReport> {
    if replications < 2 {
        return Err(LeakError::Domain("at least two replications are needed".into()));
    }
    let p = mech.point();
    let smp = Samplers::new(mech);
    let outcomes: Vec<ReplicationOutcome> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut pop = sample_with(mech, adv, &smp, seed, rep, opts);
            run_replication(&mut pop, mech, seed, rep, opts)
        })
        .collect::<Result<_>>()?;
    let n_fixed = ((p.config.population_size as f64) * p.theta_bar()).round().max(1.0) as usize;
    let fixed: Vec<(f64, f64)> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| fixed_n_replication(mech, adv, &smp, n_fixed, seed, rep))
        .collect();

    let col = |f: &dyn Fn(&ReplicationOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<f64>>();
    let est = Moments::of(&col(&|o| o.estimate));
    let ng = p.num_groups();
    let mut joins = vec![0usize; ng];
    let mut counts = vec![0usize; ng];
    for o in &outcomes {
        for i in 0..ng {
            joins[i] += o.joins[i];
            counts[i] += o.counts[i];
        }
    }
    let join_rates = (0..ng).map(|i| if counts[i] > 0 { joins[i] as f64 / counts[i] as f64 } else { f64::NAN }).collect();
    let fixed_est: Vec<f64> = fixed.iter().map(|x| x.0).collect();
    let fixed_err: Vec<f64> = fixed.iter().map(|x| x.0 - x.1).collect();
    Ok(SimulationReport {
        replications,
        seed,
        mean_estimate: est.mean,
        variance: est.variance,
        participant_mean: Moments::of(&col(&|o| o.participant_mean)).mean,
        true_mean: Moments::of(&col(&|o| o.true_mean)).mean,
        bias: Moments::of(&col(&|o| o.true_mean - o.estimate)),
        ht_error: Moments::of(&col(&|o| o.estimate - o.participant_mean)),
        total_payment: Moments::of(&col(&|o| o.spend)),
        join_rates,
        fixed_n: FixedNStats { participants: n_fixed, estimate: Moments::of(&fixed_est), ht_error: Moments::of(&fixed_err) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupJoinCheck {
    pub group: usize,
    pub target: f64,
    pub empirical: f64,
    /// Three binomial standard deviations of the pooled rate.
    pub bound: f64,
    pub agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumVerdict {
    pub passed: bool,
    pub groups: Vec<GroupJoinCheck>,
}

/// Samples populations and lets every agent take its best-response join decision (the
/// boundary found by the participation audit), then compares pooled join rates with the
/// target profile.
pub fn verify_equilibrium_empirical(mech: &Mechanism, replications: usize, seed: u64) -> Result<EquilibriumVerdict> {
    let p = mech.point();
    let ng = p.num_groups();
    let boundary: Vec<f64> = participation_audit(mech).groups.iter().map(|g| g.boundary).collect();
    let smp = Samplers::new(mech);
    let s = p.config.population_size;
    let per_rep: Vec<(Vec<usize>, Vec<usize>)> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let mut joins = vec![0; ng];
            let mut counts = vec![0; ng];
            for k in 0..s {
                let mut rng = agent_rng(seed, STREAM_JOIN, rep, k);
                let i = smp.group(rng.gen::<f64>());
                let c = smp.costs[i].quantile(rng.gen::<f64>());
                counts[i] += 1;
                if c <= boundary[i] {
                    joins[i] += 1;
                }
            }
            (joins, counts)
        })
        .collect();
    let mut joins = vec![0usize; ng];
    let mut counts = vec![0usize; ng];
    for (j, c) in &per_rep {
        for i in 0..ng {
            joins[i] += j[i];
            counts[i] += c[i];
        }
    }
    let groups: Vec<GroupJoinCheck> = (0..ng)
        .map(|i| {
            let t = p.rate(i);
            let n = counts[i].max(1) as f64;
            GroupJoinCheck {
                group: i,
                target: t,
                empirical: joins[i] as f64 / n,
                bound: 3.0 * (t * (1.0 - t) / n).sqrt(),
                agents: counts[i],
            }
        })
        .collect();
    let passed = groups.iter().all(|g| (g.empirical - g.target).abs() <= g.bound);
    Ok(EquilibriumVerdict { passed, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{solve_allocation, AllocationRule};
    use crate::testkit::{single_group, uniform_market};
    use approx::assert_relative_eq;

    fn market() -> Mechanism {
        Mechanism::new(solve_allocation(&uniform_market().point().unwrap()).unwrap())
    }

    #[test]
    fn populations_are_reproducible() {
        let m = market();
        let adv = AdversaryProfile::constant(0.4);
        let o = SimOptions::default();
        let a = sample_population(&m, &adv, 9, 3, &o);
        let b = sample_population(&m, &adv, 9, 3, &o);
        assert_eq!(a, b);
        let c = sample_population(&m, &adv, 9, 4, &o);
        assert_ne!(a, c);
        let ones = AdversaryProfile::constant(1.0);
        assert!(sample_population(&m, &ones, 1, 0, &o).iter().all(|x| x.x));
    }

    #[test]
    fn beta_sampler_inverts_cdf() {
        let d = CostDistribution::beta(0.7, 2.5, 0.2, 1.4).unwrap();
        let smp = CostSampler::new(&d);
        for u in [1e-6, 0.01, 0.3, 0.77, 0.999] {
            assert!((smp.quantile(u) - d.quantile(u)).abs() <= 1e-13);
            assert_relative_eq!(d.cdf(smp.quantile(u)), u, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_selection_gives_participant_mean() {
        let mut pt = single_group(CostDistribution::uniform(0.5, 1.5).unwrap(), 0.2, 0.6);
        pt.config.population_size = 200;
        let pt = pt.with_rates(vec![0.6]).unwrap();
        let m = Mechanism::new(AllocationRule::constant(&pt, 1.0).unwrap());
        let adv = AdversaryProfile::constant(0.5);
        let o = SimOptions::default();
        let mut pop = sample_population(&m, &adv, 5, 0, &o);
        let out = run_replication(&mut pop, &m, 5, 0, &o).unwrap();
        assert_eq!(out.estimate, out.participant_mean);
        for a in &pop {
            assert!(!a.selected || a.joined);
            assert!(a.payment == 0.0 || a.selected);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let m = market();
        let adv = AdversaryProfile::constant(0.6);
        let o = SimOptions { record_payments: false, ..Default::default() };
        let a = estimate_bias_variance(&m, &adv, 200, 17, &o).unwrap();
        let b = estimate_bias_variance(&m, &adv, 200, 17, &o).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn equilibrium_and_perturbation() {
        let m = market();
        assert!(verify_equilibrium_empirical(&m, 20, 1).unwrap().passed);
        let bad = m.with_kappa_shift(1, 0.05);
        assert!(!verify_equilibrium_empirical(&bad, 20, 1).unwrap().passed);
    }
}
