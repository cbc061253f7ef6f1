//! Command implementations. Each returns `Ok(passed)`; `Ok(false)` means an audit failed.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use leakmarket_core::allocation::{solve_allocation_with, CaseTag, Structure};
use leakmarket_core::market::{validate_assumptions, MarketConfig, MarketPoint, ValidationReport};
use leakmarket_core::minimax::{discretize_panels, solve_discrete, verify_saddle};
use leakmarket_core::payment::{
    envelope_check, expected_total_payment_with, participation_audit, truthfulness_audit, BudgetAccount, Mechanism,
    ParticipationVerdict, TruthfulnessVerdict,
};
use leakmarket_core::simulate::{estimate_bias_variance, SimOptions, SimulationReport};
use leakmarket_core::sweep::{run_sweep, PropertyCheck, SweepAxis, SweepRequest};
use leakmarket_core::tradeoff::{adversary_best_response, full_participation_check, worst_case_tradeoff, TradeoffReport};
use leakmarket_core::virtual_cost::{regularity_check, RegularityReport, VirtualCostDensity};
use leakmarket_core::LeakError;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Cli, Command};

const CURVE_POINTS: usize = 201;
const TRUTH_SAMPLES: usize = 10_000;
const ENVELOPE_POINTS: usize = 200;
const ENVELOPE_TOL: f64 = 1e-6;
const BUDGET_TOL: f64 = 1e-6;
const ORACLE_KS: [usize; 3] = [10, 100, 1000];
/// Sup-norm gaps at or below this are rounding noise and count as converged.
const ORACLE_FLOOR: f64 = 1e-12;

/// Config hash and seed stamped on every artifact.
#[derive(Debug, Clone, Serialize)]
struct Provenance {
    config_sha256: String,
    seed: u64,
    command: String,
    version: &'static str,
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

struct Loaded {
    config: MarketConfig,
    prov: Provenance,
}

fn load(cli: &Cli) -> Result<Loaded> {
    let bytes = fs::read(&cli.config).map_err(|e| LeakError::Config {
        path: "--config".into(),
        message: format!("cannot read {}: {e}", cli.config.display()),
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| LeakError::Config { path: "--config".into(), message: "config is not UTF-8".into() })?;
    let config = MarketConfig::from_json_str(&text)?;
    let command = format!("{:?}", cli.command).to_lowercase();
    let prov = Provenance {
        config_sha256: hex::encode(Sha256::digest(&bytes)),
        seed: cli.seed,
        command,
        version: env!("CARGO_PKG_VERSION"),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(Loaded { config, prov })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, prov: &Provenance, body: T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&Artifact { provenance: prov, body })?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn solve(point: &MarketPoint) -> Result<(Mechanism, VirtualCostDensity)> {
    let dens = VirtualCostDensity::new(point)?;
    let alloc = solve_allocation_with(point, &dens)?;
    Ok((Mechanism::new(alloc), dens))
}

pub fn run(cli: &Cli) -> Result<bool> {
    let ctx = load(cli)?;
    match cli.command {
        Command::Solve => cmd_solve(cli, &ctx),
        Command::Audit => cmd_audit(cli, &ctx),
        Command::Simulate => cmd_simulate(cli, &ctx),
        Command::Sweep => cmd_sweep(cli, &ctx),
        Command::CheckFullParticipation => cmd_full_participation(cli, &ctx),
        Command::Oracle => cmd_oracle(cli, &ctx),
    }
}

#[derive(Serialize)]
struct SolveBody<'a> {
    structure: Structure,
    case: CaseTag,
    assumptions: ValidationReport,
    budget: BudgetAccount,
    tradeoff: TradeoffReport,
    mechanism: &'a Mechanism,
}

#[derive(Serialize)]
struct AllocationRow<'a> {
    config_sha256: &'a str,
    seed: u64,
    group: usize,
    cost: f64,
    participates: bool,
    virtual_cost: Option<f64>,
    allocation: f64,
}

#[derive(Serialize)]
struct PaymentRow<'a> {
    config_sha256: &'a str,
    seed: u64,
    group: usize,
    report: f64,
    allocation: f64,
    /// Empty where the allocation is zero.
    payment: Option<f64>,
    expected_payment: f64,
    truthful_utility: f64,
}

fn cmd_solve(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let point = ctx.config.point()?;
    let (mech, dens) = solve(&point)?;
    let alloc = &mech.allocation;
    let body = SolveBody {
        structure: alloc.structure,
        case: alloc.case,
        assumptions: validate_assumptions(&ctx.config),
        budget: expected_total_payment_with(&mech, &dens)?,
        tradeoff: worst_case_tradeoff(&mech)?,
        mechanism: &mech,
    };
    println!("structure {:?}, case {:?}, objective {:.6e}", body.structure, body.case, body.tradeoff.objective);
    write_json(&cli.out, "mechanism.json", &ctx.prov, &body)?;

    let hash = ctx.prov.config_sha256.as_str();
    let rows: Vec<AllocationRow> = alloc
        .samples(CURVE_POINTS)
        .into_iter()
        .map(|(group, cost, a)| {
            let participates = cost <= point.tau(group);
            AllocationRow {
                config_sha256: hash,
                seed: cli.seed,
                group,
                cost,
                participates,
                virtual_cost: participates.then(|| alloc.phi(group, cost)),
                allocation: a,
            }
        })
        .collect();
    write_csv(&cli.out, "allocation.csv", &rows)?;

    let mut pay = Vec::new();
    for i in 0..point.num_groups() {
        let (lo, tau) = (point.dist(i).c_min(), point.tau(i));
        for k in 0..CURVE_POINTS {
            let r = if k + 1 == CURVE_POINTS { tau } else { lo + (tau - lo) * k as f64 / (CURVE_POINTS - 1) as f64 };
            pay.push(PaymentRow {
                config_sha256: hash,
                seed: cli.seed,
                group: i,
                report: r,
                allocation: alloc.eval(i, r),
                payment: mech.payment(r, i).ok(),
                expected_payment: mech.expected_payment(i, r),
                truthful_utility: mech.utility(i, r, r),
            });
        }
    }
    write_csv(&cli.out, "payment.csv", &pay)?;
    Ok(true)
}

#[derive(Serialize)]
struct BudgetCheck {
    passed: bool,
    account: BudgetAccount,
    /// |virtual-form spend - B| / B; only binding cases must be near zero.
    binding_error: f64,
    binding_required: bool,
}

#[derive(Serialize)]
struct EnvelopeCheck {
    passed: bool,
    max_relative_error: Vec<f64>,
}

#[derive(Serialize)]
struct AuditBody {
    passed: bool,
    structure: Structure,
    case: CaseTag,
    regularity: Vec<RegularityReport>,
    truthfulness: TruthfulnessVerdict,
    participation: ParticipationVerdict,
    budget: BudgetCheck,
    envelope: EnvelopeCheck,
}

fn cmd_audit(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let point = ctx.config.point()?;
    let (mech, dens) = solve(&point)?;
    let n = point.num_groups();
    let regularity: Vec<RegularityReport> = (0..n).map(|i| regularity_check(&point, i)).collect();
    let truthfulness = truthfulness_audit(&mech, TRUTH_SAMPLES, cli.seed);
    let participation = participation_audit(&mech);
    let account = expected_total_payment_with(&mech, &dens)?;
    let scale = account.budget.abs().max(1e-300);
    let binding_required = mech.allocation.case != CaseTag::Three;
    let binding_error = (account.virtual_form - account.budget).abs() / scale;
    let budget = BudgetCheck {
        passed: account.identity_gap <= BUDGET_TOL * scale
            && account.virtual_form <= account.budget * (1.0 + BUDGET_TOL)
            && (!binding_required || binding_error <= BUDGET_TOL),
        account,
        binding_error,
        binding_required,
    };
    let errs: Vec<f64> = (0..n).map(|i| envelope_check(&mech, i, ENVELOPE_POINTS)).collect();
    let envelope = EnvelopeCheck { passed: errs.iter().all(|e| *e <= ENVELOPE_TOL), max_relative_error: errs };
    let passed = regularity.iter().all(|r| r.passed)
        && truthfulness.passed
        && participation.passed
        && budget.passed
        && envelope.passed;
    println!(
        "regularity {}, truthfulness {}, participation {}, budget {}, envelope {}",
        verdict(regularity.iter().all(|r| r.passed)),
        verdict(truthfulness.passed),
        verdict(participation.passed),
        verdict(budget.passed),
        verdict(envelope.passed)
    );
    let body = AuditBody {
        passed,
        structure: mech.allocation.structure,
        case: mech.allocation.case,
        regularity,
        truthfulness,
        participation,
        budget,
        envelope,
    };
    write_json(&cli.out, "audit.json", &ctx.prov, &body)?;
    Ok(passed)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Serialize)]
struct SimulateBody {
    predicted_bias: f64,
    predicted_variance: f64,
    simulation: SimulationReport,
    adversary: leakmarket_core::tradeoff::AdversaryProfile,
}

fn cmd_simulate(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let point = ctx.config.point()?;
    let (mech, _) = solve(&point)?;
    let adv = adversary_best_response(&mech)?;
    let trade = worst_case_tradeoff(&mech)?;
    let simulation = estimate_bias_variance(&mech, &adv, cli.reps, cli.seed, &SimOptions::default())?;
    println!(
        "bias {:.4e} +- {:.1e} (predicted {:.4e}), fixed-N estimator error {:.4e} +- {:.1e}, {} replications",
        simulation.bias.mean,
        simulation.bias.mean_se,
        trade.worst_case_bias,
        simulation.fixed_n.ht_error.mean,
        simulation.fixed_n.ht_error.mean_se,
        simulation.replications
    );
    let body = SimulateBody {
        predicted_bias: trade.worst_case_bias,
        predicted_variance: trade.worst_case_variance,
        simulation,
        adversary: adv,
    };
    write_json(&cli.out, "simulation.json", &ctx.prov, &body)?;
    Ok(true)
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    config_sha256: &'a str,
    seed: u64,
    axis: SweepAxis,
    group: usize,
    index: usize,
    value: f64,
    error: Option<String>,
    structure: Option<Structure>,
    case: Option<CaseTag>,
    low_budget: bool,
    group_payment: f64,
    individual_payment: f64,
    frozen_group_payment: f64,
    frozen_individual_payment: f64,
    objective: f64,
    t_star: Option<f64>,
    optimal_rate: Option<f64>,
}

#[derive(Serialize)]
struct SweepBody {
    passed: bool,
    axis: SweepAxis,
    group: usize,
    probe_cost: f64,
    failed_points: usize,
    checks: Vec<PropertyCheck>,
}

fn cmd_sweep(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let missing = |flag: &str| LeakError::Config { path: flag.into(), message: "required for sweep".into() };
    let axis: SweepAxis = cli.axis.as_deref().ok_or_else(|| missing("--axis"))?.parse()?;
    let from = cli.from.ok_or_else(|| missing("--from"))?;
    let to = cli.to.ok_or_else(|| missing("--to"))?;
    let steps = cli.steps.ok_or_else(|| missing("--steps"))?;
    let mut req = SweepRequest::new(axis, from, to, steps);
    req.group = cli.group;
    let report = run_sweep(&ctx.config, &req)?;
    let hash = ctx.prov.config_sha256.as_str();
    let rows: Vec<SweepCsvRow> = report
        .rows
        .iter()
        .map(|r| SweepCsvRow {
            config_sha256: hash,
            seed: cli.seed,
            axis,
            group: report.group,
            index: r.index,
            value: r.value,
            error: r.error.clone(),
            structure: r.structure,
            case: r.case,
            low_budget: r.low_budget,
            group_payment: r.group_payment,
            individual_payment: r.individual_payment,
            frozen_group_payment: r.frozen_group_payment,
            frozen_individual_payment: r.frozen_individual_payment,
            objective: r.objective,
            t_star: r.t_star,
            optimal_rate: r.optimal_rate,
        })
        .collect();
    write_csv(&cli.out, "sweep.csv", &rows)?;
    for c in &report.checks {
        println!("property {} {:?} on {}: {} ({})", c.property, c.kind, c.column, c.outcome, c.detail);
    }
    let passed = report.passed();
    let body = SweepBody {
        passed,
        axis,
        group: report.group,
        probe_cost: report.probe_cost,
        failed_points: report.failed_points(),
        checks: report.checks,
    };
    write_json(&cli.out, "sweep.json", &ctx.prov, &body)?;
    Ok(passed)
}

fn cmd_full_participation(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let per_axis = cli.steps.unwrap_or(5);
    let report = full_participation_check(&ctx.config, per_axis)?;
    println!(
        "benefit-driven condition {}, leakage-driven condition {}, max dT*/dtheta {:.3e}, consistent {}",
        report.prop1_holds, report.prop2_holds, report.max_t_slope, report.consistent
    );
    let consistent = report.consistent;
    write_json(&cli.out, "full_participation.json", &ctx.prov, report)?;
    Ok(consistent)
}

#[derive(Debug, Serialize)]
struct OracleRow<'a> {
    config_sha256: &'a str,
    seed: u64,
    k: usize,
    atoms: usize,
    continuous_case: CaseTag,
    discrete_case: CaseTag,
    /// sup over atoms of |A_disc - A_cont| on the atom's panel.
    sup_error: f64,
    saddle_verified: bool,
}

fn cmd_oracle(cli: &Cli, ctx: &Loaded) -> Result<bool> {
    let point = ctx.config.point()?;
    let (mech, dens) = solve(&point)?;
    let alloc = &mech.allocation;
    let hash = ctx.prov.config_sha256.as_str();
    let rows = ORACLE_KS
        .par_iter()
        .map(|&k| -> Result<OracleRow> {
            let (inst, panels) = discretize_panels(&point, &dens, k)?;
            let sad = solve_discrete(&inst)?;
            // A is monotone in phi, so the panel sup is attained at an edge.
            let sup_error = sad
                .a
                .iter()
                .zip(&panels)
                .map(|(&a, &(lo, hi))| (a - alloc.of_phi(lo)).abs().max((a - alloc.of_phi(hi)).abs()))
                .fold(0.0, f64::max);
            Ok(OracleRow {
                config_sha256: hash,
                seed: cli.seed,
                k,
                atoms: inst.len(),
                continuous_case: alloc.case,
                discrete_case: sad.case,
                sup_error,
                saddle_verified: verify_saddle(&sad, &inst, 1e-8).passed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &rows {
        println!("K={:<5} sup error {:.3e}, saddle verified {}", r.k, r.sup_error, r.saddle_verified);
    }
    write_csv(&cli.out, "oracle.csv", &rows)?;
    let decreasing = rows.windows(2).all(|w| w[1].sup_error < w[0].sup_error || w[1].sup_error <= ORACLE_FLOOR);
    Ok(decreasing && rows.iter().all(|r| r.saddle_verified))
}
