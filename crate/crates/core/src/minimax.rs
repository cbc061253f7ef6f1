//! Discrete zero-sum game between the analyst (selection probabilities A_k) and an
//! adversary choosing data-cost correlation (p_k), over K virtual-cost atoms.
//!
//! The analyst minimizes and the adversary maximizes
//! `U(A,p) = a (<pi, p/A> - <pi,p>^2/theta) + (1-gamma)(1-theta)(1 - <pi,p>/theta)`
//! with `a = gamma/(s theta^2)`, subject to `sum_k pi_k phi_k A_k <= L` and
//! `A, p in [0,1]^K`, where `L = B/s - l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{budget_residual, CaseTag};
use crate::error::{LeakError, Result};
use crate::market::MarketPoint;
use crate::quad;
use crate::virtual_cost::VirtualCostDensity;

/// Lower and upper ends of the multiplier search.
const LAMBDA_BRACKET: (f64, f64) = (1e-16, 1e16);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub phi: Vec<f64>,
    pub pi: Vec<f64>,
    pub gamma: f64,
    pub s: f64,
    pub theta_bar: f64,
    /// B/s - l.
    pub budget_gap: f64,
    #[serde(skip)]
    prefix: Prefix,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Prefix {
    /// sum_{k<=m} pi phi, index m in 0..=K
    head_phi: Vec<f64>,
    /// sum_{k>m} pi sqrt(phi)
    tail_sqrt: Vec<f64>,
    /// sum_{k>m} pi
    tail_mass: Vec<f64>,
}

impl DiscreteInstance {
    pub fn new(phi: Vec<f64>, pi: Vec<f64>, gamma: f64, s: f64, theta_bar: f64, budget_gap: f64) -> Result<Self> {
        if phi.is_empty() || phi.len() != pi.len() {
            return Err(LeakError::Domain("phi and pi must be non-empty and the same length".into()));
        }
        for k in 0..phi.len() {
            if !(phi[k] > 0.0 && phi[k].is_finite()) {
                return Err(LeakError::Domain(format!("phi[{k}] = {} must be positive", phi[k])));
            }
            if !(pi[k] > 0.0) {
                return Err(LeakError::Domain(format!("pi[{k}] = {} must be positive", pi[k])));
            }
            if k > 0 && phi[k] <= phi[k - 1] {
                return Err(LeakError::Domain("phi must be strictly increasing".into()));
            }
        }
        if !(0.0..=1.0).contains(&gamma) || !(theta_bar > 0.0 && theta_bar <= 1.0) || !(s >= 1.0) {
            return Err(LeakError::Domain("need gamma in [0,1], theta in (0,1], s >= 1".into()));
        }
        let mut inst = Self { phi, pi, gamma, s, theta_bar, budget_gap, prefix: Prefix::default() };
        inst.build_prefix();
        Ok(inst)
    }

    fn build_prefix(&mut self) {
        let k = self.phi.len();
        let mut head_phi = vec![0.0; k + 1];
        let mut tail_sqrt = vec![0.0; k + 1];
        let mut tail_mass = vec![0.0; k + 1];
        for m in 1..=k {
            head_phi[m] = head_phi[m - 1] + self.pi[m - 1] * self.phi[m - 1];
        }
        for m in (0..k).rev() {
            tail_sqrt[m] = tail_sqrt[m + 1] + self.pi[m] * self.phi[m].sqrt();
            tail_mass[m] = tail_mass[m + 1] + self.pi[m];
        }
        self.prefix = Prefix { head_phi, tail_sqrt, tail_mass };
    }

    /// Restores cached sums after deserialization.
    pub fn rehydrate(mut self) -> Self {
        self.build_prefix();
        self
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    fn var_weight(&self) -> f64 {
        self.gamma / (self.s * self.theta_bar * self.theta_bar)
    }

    fn bias_weight(&self) -> f64 {
        (1.0 - self.gamma) * (1.0 - self.theta_bar)
    }

    /// theta^2 (1 - theta)(1 - gamma) s, the constant term of R.
    fn r_const(&self) -> f64 {
        self.theta_bar * self.theta_bar * (1.0 - self.theta_bar) * (1.0 - self.gamma) * self.s
    }

    /// The game payoff U(A, p).
    pub fn payoff(&self, a: &[f64], p: &[f64]) -> f64 {
        let mut ratio = 0.0;
        let mut mass = 0.0;
        for k in 0..self.len() {
            if p[k] > 0.0 {
                ratio += self.pi[k] * p[k] / a[k];
            }
            mass += self.pi[k] * p[k];
        }
        let th = self.theta_bar;
        self.var_weight() * (ratio - mass * mass / th) + self.bias_weight() * (1.0 - mass / th)
    }

    /// sum_k pi_k phi_k A_k.
    pub fn spend(&self, a: &[f64]) -> f64 {
        (0..self.len()).map(|k| self.pi[k] * self.phi[k] * a[k]).sum()
    }

    /// Marginal value to the adversary of raising p_k.
    pub fn marginal(&self, k: usize, a: &[f64], p: &[f64]) -> f64 {
        let mass: f64 = (0..self.len()).map(|j| self.pi[j] * p[j]).sum();
        let th = self.theta_bar;
        self.var_weight() * (1.0 / a[k] - 2.0 * mass / th) - self.bias_weight() / th
    }
}

/// Q(m, z), with 1-based m.
pub fn q_disc(m: usize, z: f64, inst: &DiscreteInstance) -> f64 {
    let p = &inst.prefix;
    p.head_phi[m] + (inst.phi[m - 1] / z).sqrt() * p.tail_sqrt[m]
}

/// R(m, z), with 1-based m.
pub fn r_disc(m: usize, z: f64, inst: &DiscreteInstance) -> f64 {
    let p = &inst.prefix;
    2.0 * inst.gamma * (z / inst.phi[m - 1] * p.head_phi[m] + p.tail_mass[m]) + inst.r_const()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSaddle {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
    pub case: CaseTag,
    pub m_star: Option<usize>,
    pub z_star: Option<f64>,
    pub k_prime: Option<usize>,
    pub z_prime: Option<f64>,
    pub k_star: Option<usize>,
    /// Game value U(A, p).
    pub value: f64,
}

fn lambda_from(inst: &DiscreteInstance, weighted_sqrt: f64, denom: f64) -> f64 {
    inst.gamma * weighted_sqrt * weighted_sqrt / (inst.s * inst.theta_bar * inst.theta_bar * denom * denom)
}

/// Closed-form saddle of the discrete game, by the Q/R case analysis.
pub fn solve_discrete(inst: &DiscreteInstance) -> Result<DiscreteSaddle> {
    let big_l = inst.budget_gap;
    let kk = inst.len();
    if !(big_l > 0.0) {
        return Err(LeakError::Precondition(format!("B/s - l must be positive, got {big_l:e}")));
    }
    let total_phi = inst.prefix.head_phi[kk];
    if total_phi <= big_l {
        return Err(LeakError::Precondition(format!(
            "no-trivial-solution: sum pi phi = {total_phi:e} must exceed B/s - l = {big_l:e}"
        )));
    }
    let g_th = inst.gamma * inst.theta_bar;
    // ratio(m, z) <= rho_B  <=>  L R(m,z) - gamma theta Q(m,z) >= 0
    let excess = |m: usize, z: f64| big_l * r_disc(m, z, inst) - g_th * q_disc(m, z, inst);
    let sqrt_pphi = |p: &[f64]| -> f64 { (0..kk).map(|k| inst.pi[k] * (p[k] * inst.phi[k]).sqrt()).sum() };
    let finish = |a: Vec<f64>, p: Vec<f64>, lambda: f64, case: CaseTag| {
        let value = inst.payoff(&a, &p);
        DiscreteSaddle { a, p, lambda, case, m_star: None, z_star: None, k_prime: None, z_prime: None, k_star: None, value }
    };

    if excess(1, 1.0) < 0.0 {
        let tot = inst.prefix.tail_sqrt[0];
        let a = inst.phi.iter().map(|&f| big_l / (f.sqrt() * tot)).collect();
        let lambda = lambda_from(inst, tot, big_l);
        return Ok(finish(a, vec![1.0; kk], lambda, CaseTag::One));
    }
    if excess(kk, 1.0) >= 0.0 {
        let chi = big_l / total_phi;
        let a = vec![chi; kk];
        let c0 = inst.r_const();
        if g_th * total_phi > big_l * c0 {
            // L R(K, z) = gamma theta Q(K, z) is linear in z; Q(K, .) does not depend on z.
            let z = ((g_th * total_phi / big_l - c0) * inst.phi[kk - 1] / (2.0 * inst.gamma * total_phi)).min(1.0);
            let p: Vec<f64> = inst.phi.iter().map(|&f| z * f / inst.phi[kk - 1]).collect();
            let lambda = lambda_from(inst, sqrt_pphi(&p), big_l);
            let mut sad = finish(a, p, lambda, CaseTag::Three);
            sad.z_star = Some(z);
            return Ok(sad);
        }
        return Ok(finish(a, vec![0.0; kk], 0.0, CaseTag::Three));
    }

    // Case 2. Claim 1 makes the ratio increasing in m, so the scan finds the unique bracket.
    let m = (1..kk).find(|&m| excess(m, 1.0) >= 0.0 && excess(m + 1, 1.0) < 0.0).ok_or_else(|| {
        LeakError::NoConvergence("no m* bracketing the budget ratio; Q/R is not monotone".into())
    })?;
    let z0 = inst.phi[m - 1] / inst.phi[m];
    let z_star = quad::bisect(|z| excess(m, z), z0, 1.0, 1e-15);
    let q_star = q_disc(m, z_star, inst);
    let pr = &inst.prefix;
    if big_l <= q_star {
        let chi = big_l / q_star;
        let eta = (big_l - chi * pr.head_phi[m]) / pr.tail_sqrt[m];
        let a: Vec<f64> = (0..kk).map(|k| if k < m { chi } else { eta / inst.phi[k].sqrt() }).collect();
        let p: Vec<f64> =
            (0..kk).map(|k| if k < m { z_star * inst.phi[k] / inst.phi[m - 1] } else { 1.0 }).collect();
        let lambda = lambda_from(inst, sqrt_pphi(&p), big_l);
        let mut sad = finish(a, p, lambda, CaseTag::TwoA);
        sad.m_star = Some(m);
        sad.z_star = Some(z_star);
        return Ok(sad);
    }

    // Sub-case 2b: plateau at 1.
    let k_prime = (1..=kk).rev().find(|&k| r_disc(k, 1.0, inst) >= g_th).unwrap_or(1);
    let z_lo = if k_prime < kk { inst.phi[k_prime - 1] / inst.phi[k_prime] } else { 0.0 };
    let z_prime = quad::bisect(|z| r_disc(k_prime, z, inst) - g_th, z_lo, 1.0, 1e-15);
    let k_star = (1..=kk).rev().find(|&k| q_disc(k, 1.0, inst) < big_l).ok_or_else(|| {
        LeakError::NoConvergence("no k with Q(k,1) < B/s - l in sub-case 2b".into())
    })?;
    let eta = (big_l - pr.head_phi[k_star]) / pr.tail_sqrt[k_star];
    let a: Vec<f64> = (0..kk).map(|k| if k < k_star { 1.0 } else { eta / inst.phi[k].sqrt() }).collect();
    let p: Vec<f64> =
        (0..kk).map(|k| if k < k_prime { z_prime * inst.phi[k] / inst.phi[k_prime - 1] } else { 1.0 }).collect();
    let lambda = lambda_from(inst, pr.tail_sqrt[k_star], big_l - pr.head_phi[k_star]);
    let mut sad = finish(a, p, lambda, CaseTag::TwoB);
    sad.m_star = Some(m);
    sad.z_star = Some(z_star);
    sad.k_prime = Some(k_prime);
    sad.z_prime = Some(z_prime);
    sad.k_star = Some(k_star);
    Ok(sad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleViolation {
    /// "adversary", "collector" or "budget".
    pub condition: String,
    pub index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleVerdict {
    pub passed: bool,
    pub violations: Vec<SaddleViolation>,
}

/// Checks the mutual-best-response conditions of both players at tolerance `tol`.
///
/// Adversary conditions compare the marginal value of p_k against zero, scaled by the
/// magnitude of its terms. Collector conditions compare A_k against
/// min(1, sqrt(gamma p_k/(s theta^2 lambda phi_k))) and require the budget to bind.
/// With p identically zero every feasible A is a best response, so only feasibility is checked.
pub fn verify_saddle(sad: &DiscreteSaddle, inst: &DiscreteInstance, tol: f64) -> SaddleVerdict {
    let kk = inst.len();
    let mut v = Vec::new();
    let mass: f64 = (0..kk).map(|k| inst.pi[k] * sad.p[k]).sum();
    let th = inst.theta_bar;
    let (aw, bw) = (inst.var_weight(), inst.bias_weight());
    for k in 0..kk {
        let (a, p) = (sad.a[k], sad.p[k]);
        if !(0.0..=1.0 + 1e-15).contains(&a) || !(0.0..=1.0 + 1e-15).contains(&p) {
            v.push(SaddleViolation { condition: "range".into(), index: Some(k), detail: format!("A={a}, p={p}") });
            continue;
        }
        let m = inst.marginal(k, &sad.a, &sad.p);
        let scale = aw * (1.0 / a + 2.0 * mass / th) + bw / th;
        let slack = tol * scale.max(f64::MIN_POSITIVE);
        let bad = if p >= 1.0 - 1e-12 {
            m < -slack
        } else if p <= 1e-12 {
            m > slack
        } else {
            m.abs() > slack
        };
        if bad {
            v.push(SaddleViolation {
                condition: "adversary".into(),
                index: Some(k),
                detail: format!("p = {p:.6e} but marginal = {m:.6e}"),
            });
        }
    }
    let spend = inst.spend(&sad.a);
    let all_zero = sad.p.iter().all(|&p| p == 0.0);
    if all_zero {
        if spend > inst.budget_gap * (1.0 + tol) {
            v.push(SaddleViolation { condition: "budget".into(), index: None, detail: format!("spend {spend:e} exceeds budget") });
        }
    } else {
        for k in 0..kk {
            let target = if sad.lambda > 0.0 {
                (inst.gamma * sad.p[k] / (inst.s * th * th * sad.lambda * inst.phi[k])).sqrt().min(1.0)
            } else if sad.p[k] > 0.0 {
                1.0
            } else {
                0.0
            };
            if (sad.a[k] - target).abs() > tol * target.max(1.0) {
                v.push(SaddleViolation {
                    condition: "collector".into(),
                    index: Some(k),
                    detail: format!("A = {:.10e}, best response {:.10e}", sad.a[k], target),
                });
            }
        }
        if (spend - inst.budget_gap).abs() > tol * inst.budget_gap {
            v.push(SaddleViolation {
                condition: "budget".into(),
                index: None,
                detail: format!("spend {spend:.12e} vs budget {:.12e}", inst.budget_gap),
            });
        }
    }
    SaddleVerdict { passed: v.is_empty(), violations: v }
}

/// Independent saddle oracle for small K.
///
/// Works only from the two best-response characterizations. Given the adversary's
/// total mass S, an interior p_k leaves the adversary indifferent, which pins
/// A_k = a(S) = 1/(2S/theta + (1-gamma)(1-theta)/(a theta)). The analyst's best
/// response for multiplier lambda is min(1, sqrt(a/(lambda phi_k))), cut at a(S) where p_k is
/// interior. For each S the multiplier is found by log-bisection on the binding budget,
/// then S is found as a fixed point of S = sum pi_k p_k(S) by scanning `grid_resolution`
/// points and bisecting sign changes. Five extra scans on randomly shifted grids must
/// reproduce the same A; otherwise an error is returned.
///
/// Alternating exact best responses are not used: the adversary's best response is
/// bang-bang away from indifference, so that iteration cycles on interior saddles.
pub fn brute_force_saddle(inst: &DiscreteInstance, grid_resolution: usize) -> Result<DiscreteSaddle> {
    let kk = inst.len();
    if kk > 6 {
        return Err(LeakError::Precondition("brute_force_saddle is limited to K <= 6".into()));
    }
    let big_l = inst.budget_gap;
    if !(big_l > 0.0) {
        return Err(LeakError::Precondition("B/s - l must be positive".into()));
    }
    let th = inst.theta_bar;
    let (aw, bw) = (inst.var_weight(), inst.bias_weight());
    let total_phi = inst.spend(&vec![1.0; kk]);
    let flat = vec![(big_l / total_phi).min(1.0); kk];
    let make = |a: Vec<f64>, p: Vec<f64>, lambda: f64| {
        let value = inst.payoff(&a, &p);
        DiscreteSaddle { a, p, lambda, case: CaseTag::Custom, m_star: None, z_star: None, k_prime: None, z_prime: None, k_star: None, value }
    };

    // p = 0 is a saddle iff every marginal is non-positive at some feasible A; the
    // flat split maximizes min_k A_k, so it is the one to test.
    let zero = vec![0.0; kk];
    let flat_ok = (0..kk).all(|k| inst.marginal(k, &flat, &zero) <= 0.0);
    if aw == 0.0 || flat_ok {
        return Ok(make(flat, zero, 0.0));
    }

    let plateau = |s: f64| 1.0 / (2.0 * s / th + bw / (aw * th));
    let a_unc = |lambda: f64, k: usize| (aw / (lambda * inst.phi[k])).sqrt().min(1.0);
    let solve_lambda = |cap: f64| -> Option<f64> {
        let spend = |lambda: f64| (0..kk).map(|k| inst.pi[k] * inst.phi[k] * a_unc(lambda, k).min(cap)).sum::<f64>();
        if spend(LAMBDA_BRACKET.0) < big_l || spend(LAMBDA_BRACKET.1) > big_l {
            return None;
        }
        Some(quad::bisect_log(|lam| spend(lam) - big_l, LAMBDA_BRACKET.0, LAMBDA_BRACKET.1, 1e-15))
    };
    // Strategies implied by (S, lambda(S)); None when the budget cannot bind.
    let profile_cap = |cap: f64| -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let lambda = solve_lambda(cap)?;
        let mut a = vec![0.0; kk];
        let mut p = vec![0.0; kk];
        for k in 0..kk {
            let au = a_unc(lambda, k);
            if au < cap {
                a[k] = au;
                p[k] = 1.0;
            } else {
                a[k] = cap;
                p[k] = (cap * cap * lambda * inst.phi[k] / aw).min(1.0);
            }
        }
        Some((a, p, lambda))
    };
    let profile = |s: f64| profile_cap(plateau(s));
    // S at which the indifference level reaches 1; capped atoms may be interior only there.
    let s_one = 0.5 * (th - bw / aw);
    let settle_at = |s: f64| -> Option<(Vec<f64>, Vec<f64>, f64)> {
        if s_one > 0.0 && (s - s_one).abs() <= 1e-9 * th {
            settle(inst, s_one, profile_cap(1.0)?)
        } else {
            settle(inst, s, profile(s)?)
        }
    };
    let gap = |s: f64| profile(s).map(|(_, p, _)| (0..kk).map(|k| inst.pi[k] * p[k]).sum::<f64>() - s);

    let scan = |offset: f64| -> Vec<DiscreteSaddle> {
        let n = grid_resolution.max(2);
        let mut pts: Vec<f64> = (0..=n).map(|j| th * ((j as f64 + offset) / (n as f64 + 1.0)).min(1.0)).collect();
        pts.push(th);
        let mut found = Vec::new();
        let mut prev: Option<(f64, f64)> = None;
        for &s in &pts {
            let Some(g) = gap(s) else {
                // The budget stops binding past some S; a root can hide just inside that edge.
                if let Some((s0, g0)) = prev {
                    let edge = feasibility_edge(&gap, s0, s, th);
                    if let Some(ge) = gap(edge) {
                        if (g0 > 0.0) != (ge > 0.0) {
                            let root = quad::bisect(|x| gap(x).unwrap_or(f64::NAN), s0, edge, 1e-15 * th);
                            if let Some(sad) = settle_at(root) {
                                found.push(make(sad.0, sad.1, sad.2));
                            }
                        }
                    }
                }
                prev = None;
                continue;
            };
            if prev.is_none() && s > pts[0] {
                // Entering the feasible region from the other side.
                let before = pts.iter().copied().filter(|&x| x < s).fold(0.0, f64::max);
                let edge = feasibility_edge(&gap, s, before, th);
                if let Some(ge) = gap(edge) {
                    if (ge > 0.0) != (g > 0.0) {
                        let root = quad::bisect(|x| gap(x).unwrap_or(f64::NAN), edge, s, 1e-15 * th);
                        if let Some(sad) = settle_at(root) {
                            found.push(make(sad.0, sad.1, sad.2));
                        }
                    }
                }
            }
            if g.abs() <= 1e-13 * th {
                if let Some(sad) = settle_at(s) {
                    found.push(make(sad.0, sad.1, sad.2));
                }
            } else if let Some((s0, g0)) = prev {
                if (g0 > 0.0) != (g > 0.0) {
                    let root = quad::bisect(|x| gap(x).unwrap_or(f64::NAN), s0, s, 1e-15 * th);
                    if let Some(sad) = settle_at(root) {
                        found.push(make(sad.0, sad.1, sad.2));
                    }
                }
            }
            prev = Some((s, g));
        }
        found
    };

    // Every atom on the indifference plateau: A is flat and exhausts the budget, S solves
    // a(S) = A, and lambda follows from the mass equation. The scan cannot see this
    // branch because the budget binds for a single S only.
    let mut plateau_cands = Vec::new();
    let chi = big_l / total_phi;
    if chi <= 1.0 {
        let s = 0.5 * th * (1.0 / chi - bw / (aw * th));
        if s > 0.0 && s <= th {
            let lambda = s * aw / (chi * chi * total_phi);
            let p: Vec<f64> = inst.phi.iter().map(|&f| chi * chi * lambda * f / aw).collect();
            if p.iter().all(|&x| x <= 1.0 + 1e-12) {
                plateau_cands.push(make(vec![chi; kk], p.iter().map(|x| x.min(1.0)).collect(), lambda));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5add1e);
    let mut all = scan(0.5);
    all.extend(plateau_cands);
    let mut runs = vec![all.clone()];
    for _ in 0..5 {
        let r = scan(rng.gen_range(0.0..1.0));
        all.extend(r.iter().cloned());
        runs.push(r);
    }
    let best = all
        .iter()
        .filter(|s| verify_saddle(s, inst, 1e-7).passed)
        .min_by(|x, y| {
            let vx = verify_saddle(x, inst, 1e-7).violations.len();
            let vy = verify_saddle(y, inst, 1e-7).violations.len();
            vx.cmp(&vy)
        })
        .cloned()
        .ok_or_else(|| LeakError::NoConvergence("no fixed point of the best-response map was found".into()))?;
    for run in runs.iter().filter(|r| !r.is_empty()) {
        let agrees = run.iter().any(|s| s.a.iter().zip(&best.a).all(|(x, y)| (x - y).abs() < 1e-8));
        if !agrees {
            return Err(LeakError::NoConvergence("restarts disagree on the analyst strategy".into()));
        }
    }
    Ok(best)
}

/// Last feasible point between a feasible `inside` and an infeasible `outside`.
fn feasibility_edge<G: Fn(f64) -> Option<f64>>(gap: &G, mut inside: f64, mut outside: f64, th: f64) -> f64 {
    for _ in 0..200 {
        if (outside - inside).abs() <= 1e-15 * th {
            break;
        }
        let mid = 0.5 * (inside + outside);
        if gap(mid).is_some() {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    inside
}

/// Turns a bracketed root of the mass equation into strategies. At the plateau-at-one
/// discontinuity the capped atoms absorb the missing mass along a ramp p = min(1, t phi).
fn settle(inst: &DiscreteInstance, s: f64, prof: (Vec<f64>, Vec<f64>, f64)) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let (a, mut p, lambda) = prof;
    let kk = inst.len();
    let mass = |p: &[f64]| (0..kk).map(|k| inst.pi[k] * p[k]).sum::<f64>();
    let miss = s - mass(&p);
    if miss.abs() <= 1e-10 * inst.theta_bar {
        return Some((a, p, lambda));
    }
    let capped: Vec<usize> = (0..kk).filter(|&k| a[k] >= 1.0 - 1e-12 && p[k] < 1.0).collect();
    if capped.is_empty() || miss < 0.0 {
        return None;
    }
    let t_lo = lambda / inst.var_weight();
    let fill = |t: f64| {
        let mut q = p.clone();
        for &k in &capped {
            q[k] = (t * inst.phi[k]).min(1.0).max(p[k]);
        }
        mass(&q) - s
    };
    let t_hi = 1.0 / inst.phi[capped[0]];
    if fill(t_hi) < 0.0 {
        return None;
    }
    let t = quad::bisect(fill, t_lo, t_hi, 1e-16 * t_hi);
    for &k in &capped {
        p[k] = (t * inst.phi[k]).min(1.0).max(p[k]);
    }
    Some((a, p, lambda))
}

/// K equal-width panels over [phi_min, phi_max]; atoms at panel midpoints with the panel's
/// mass. Panels carrying no participants are dropped.
pub fn discretize(point: &MarketPoint, dens: &VirtualCostDensity, k: usize) -> Result<DiscreteInstance> {
    discretize_panels(point, dens, k).map(|(inst, _)| inst)
}

/// As [`discretize`], also returning the [lo, hi] virtual-cost panel of each kept atom.
pub fn discretize_panels(
    point: &MarketPoint,
    dens: &VirtualCostDensity,
    k: usize,
) -> Result<(DiscreteInstance, Vec<(f64, f64)>)> {
    if k == 0 {
        return Err(LeakError::Domain("K must be at least 1".into()));
    }
    let resid = budget_residual(point)?;
    let (lo, hi) = (dens.phi_min, dens.phi_max);
    let width = (hi - lo) / k as f64;
    let mut phi = Vec::with_capacity(k);
    let mut pi = Vec::with_capacity(k);
    let mut panels = Vec::with_capacity(k);
    for j in 0..k {
        let a = lo + width * j as f64;
        let b = if j + 1 == k { hi } else { a + width };
        let mass = dens.integrate(|_| 1.0, a, b);
        if mass > 0.0 {
            phi.push(0.5 * (a + b));
            pi.push(mass);
            panels.push((a, b));
        }
    }
    let cfg = &point.config;
    let inst = DiscreteInstance::new(phi, pi, cfg.gamma, cfg.population_size as f64, point.theta_bar(), resid.gap)?;
    Ok((inst, panels))
}
