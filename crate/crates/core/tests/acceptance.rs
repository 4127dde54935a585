//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! Expensive solves are shared between criteria: the linear-quadratic
//! benchmark solution feeds criteria 1, 4 and 5, and the pure mean-tracking
//! solution feeds criteria 3 and 5.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfg_core::conditional::RegressionBasis;
use mfg_core::config::parse_config;
use mfg_core::costs::{
    check_assumption, Assumption, MeasureFunctional, ScalarMap, TerminalCost, Witness,
};
use mfg_core::diagnostics::{
    exploitability, lq_oracle, mean_martingale_check, oracle_deviation, random_perturbations,
    reduction_check_sigma_tilde_zero, smp_gap,
};
use mfg_core::fbsde::Volatility;
use mfg_core::measures::{wasserstein2, EmpiricalMeasure};
use mfg_core::mfg::{
    solve_mfg, uniqueness_probe, Discretization, Ensemble, MfgModel, MfgSolution, SolverConfig,
};
use mfg_core::paths::{conditional_flow, InitialDistribution};
use mfg_core::runner::{run, RunOptions, Verb};

const SEED: u64 = 42;
const RUNTIME_BUDGET: Duration = Duration::from_secs(300);

type Verdict = Result<(bool, String), String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn model(cost: TerminalCost, sigma_tilde: f64, horizon: f64) -> MfgModel {
    MfgModel {
        cost,
        vol: Volatility::new(0.5, sigma_tilde).expect("valid volatilities"),
        horizon,
        initial: InitialDistribution::Gaussian {
            mean: 0.0,
            std: 1.0,
        },
    }
}

fn lq_cost() -> TerminalCost {
    TerminalCost::track_mean(1.0, 1.0, 1.0).unwrap()
}

/// `(x − m̄)²`: mean tracking without a state penalty.
fn pure_tracking_cost() -> TerminalCost {
    TerminalCost::track_mean(0.0, 1.0, 1.0).unwrap()
}

fn disc(horizon: f64) -> Discretization {
    Discretization {
        steps: (100.0 * horizon).round() as usize,
        n_common: 64,
        n_particles: 2000,
        basis: RegressionBasis::affine(),
    }
}

struct Solved {
    model: MfgModel,
    ensemble: Ensemble,
    solution: MfgSolution,
    elapsed: Duration,
}

fn solve(model: MfgModel) -> Result<Solved, String> {
    let d = disc(model.horizon);
    let ensemble = Ensemble::sample(&model, &d, SEED).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let solution =
        solve_mfg(&model, &d, &SolverConfig::default(), &ensemble).map_err(|e| e.to_string())?;
    Ok(Solved {
        model,
        ensemble,
        solution,
        elapsed: t.elapsed(),
    })
}

fn lq_oracle_equivalence(lq: &Result<Solved, String>) -> Verdict {
    let s = lq.as_ref().map_err(Clone::clone)?;
    // Independent check of the closed form: a_T = 4, c_T = 2 integrated
    // backward with RK4.
    let a0 = common::riccati_backward_rk4(4.0, 1.0, 1e-4);
    let c0 = common::riccati_backward_rk4(2.0, 1.0, 1e-4);
    let oracle = lq_oracle(1.0, 1.0, 1.0, 1.0, &s.ensemble.grid()).map_err(|e| e.to_string())?;
    let ode_ok = (oracle.a[0] - a0).abs() < 1e-9
        && (oracle.b[0] - (c0 - a0)).abs() < 1e-9
        && (oracle.a[0] - 0.8).abs() < 1e-12
        && (oracle.b[0] + 2.0 / 15.0).abs() < 1e-12;
    let dev = oracle_deviation(&s.solution.control, &s.solution.paths, &oracle)
        .map_err(|e| e.to_string())?;
    let pass = ode_ok
        && dev.a0_rel <= 0.05
        && dev.b0_rel <= 0.05
        && dev.h2_rel <= 0.05
        && s.elapsed <= RUNTIME_BUDGET;
    Ok((
        pass,
        format!(
            "a0 {:.5} (oracle 0.8, rel {:.2e}), b0 {:.5} (oracle -0.13333, rel {:.2e}), \
             H2 rel {:.2e}, ODE check {}, solve {:.1}s",
            dev.a0_fitted,
            dev.a0_rel,
            dev.b0_fitted,
            dev.b0_rel,
            dev.h2_rel,
            if ode_ok { "ok" } else { "FAILED" },
            s.elapsed.as_secs_f64()
        ),
    ))
}

fn sigma_tilde_zero_reduction() -> Verdict {
    let m = model(lq_cost(), 0.0, 1.0);
    let d = disc(1.0);
    let ensemble = Ensemble::sample(&m, &d, SEED).map_err(|e| e.to_string())?;
    let (_, r) = reduction_check_sigma_tilde_zero(&m, &d, &SolverConfig::default(), &ensemble)
        .map_err(|e| e.to_string())?;
    let o = r.oracle.ok_or("no oracle for the benchmark cost")?;
    Ok((
        r.spread_ratio <= 3.0 && o.max() <= 0.05,
        format!(
            "W2 spread {:.4} = {:.2} x MC scale {:.4} (limit 3); oracle max rel deviation {:.2e}",
            r.w2_spread,
            r.spread_ratio,
            r.mc_scale,
            o.max()
        ),
    ))
}

fn conditional_mean_martingale(pt: &Result<Solved, String>) -> Verdict {
    let s = pt.as_ref().map_err(Clone::clone)?;
    let r = mean_martingale_check(&s.solution.paths, &s.ensemble, &s.model);
    Ok((
        r.worst_ratio <= 3.0,
        format!(
            "max over nodes of RMS(m̄_t - m̄_0 - σ̃W̃_t) / stderr = {:.3} (limit 3)",
            r.worst_ratio
        ),
    ))
}

fn smp_gaps(lq: &Result<Solved, String>) -> Verdict {
    let s = lq.as_ref().map_err(Clone::clone)?;
    let terminal = conditional_flow(&s.solution.paths).terminal_measures();
    let betas =
        random_perturbations(&s.solution.control, 20, 0.5, SEED).map_err(|e| e.to_string())?;
    let noise = s.ensemble.noise.full();
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for b in &betas {
        let g = smp_gap(
            &s.solution.control,
            b,
            &s.model,
            &s.ensemble.init,
            &noise,
            &terminal,
        )
        .map_err(|e| e.to_string())?;
        if g.gap < -3.0 * g.stderr {
            failures += 1;
        }
        worst = worst.min(g.gap / g.stderr);
    }
    Ok((
        failures == 0,
        format!(
            "{} perturbations, {failures} below -3 stderr, worst gap {worst:.2} stderr",
            betas.len()
        ),
    ))
}

fn exploitability_both(lq: &Result<Solved, String>, pt: &Result<Solved, String>) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s) in [("LQ", lq), ("pure tracking", pt)] {
        let s = s.as_ref().map_err(Clone::clone)?;
        let inner = SolverConfig::default().inner;
        let e = exploitability(&s.solution.control, &s.model, &s.ensemble, &inner)
            .map_err(|e| e.to_string())?;
        let limit = (1e-2 * e.j_equilibrium.abs()).max(3.0 * e.stderr);
        pass &= e.value <= limit && e.best_response_converged;
        parts.push(format!(
            "{name}: {:.2e} (limit {:.2e}, J {:.4})",
            e.value, limit, e.j_equilibrium
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn uniqueness() -> Verdict {
    let m = model(lq_cost(), 0.5, 1.0);
    let d = disc(1.0);
    let ensemble = Ensemble::sample(&m, &d, SEED).map_err(|e| e.to_string())?;
    let r = uniqueness_probe(
        &m,
        &d,
        &SolverConfig::default(),
        &ensemble,
        &[-1.0, 0.0, 1.0],
    )
    .map_err(|e| e.to_string())?;
    Ok((
        r.all_converged && r.max_relative <= 1e-2,
        format!(
            "starts {:?}: max pairwise relative H2 distance {:.2e} (limit 1e-2), all converged {}",
            r.starts, r.max_relative, r.all_converged
        ),
    ))
}

fn assumption_verifiers() -> Verdict {
    const TRIALS: usize = 10_000;
    let mut pass = true;
    let mut violations = Vec::new();
    for (name, cost) in [("LQ", lq_cost()), ("pure tracking", pure_tracking_cost())] {
        for a in [
            Assumption::A1,
            Assumption::A2,
            Assumption::A3,
            Assumption::A4,
        ] {
            let r = check_assumption(&cost, a, TRIALS, SEED).map_err(|e| e.to_string())?;
            if !r.passed() {
                pass = false;
                violations.push(format!("{name} fails {a} ({:e})", r.worst_violation));
            }
        }
    }
    let steep =
        TerminalCost::quadratic(0.5, ScalarMap::linear(-2.0), MeasureFunctional::Zero).unwrap();
    let r = check_assumption(&steep, Assumption::A4, TRIALS, SEED).map_err(|e| e.to_string())?;
    let mut notes = vec![if violations.is_empty() {
        format!("LQ and pure tracking pass A1-A4 over {TRIALS} probes")
    } else {
        violations.join(", ")
    }];
    let witnessed = r.worst_violation > 0.0
        && matches!(&r.witness, Some(Witness::CoupledClouds { xi, xi_prime }) if !xi.is_empty() && xi.len() == xi_prime.len());
    pass &= witnessed;
    notes.push(format!(
        "quadratic(A=1/2, psi=-2y) A4 flagged {witnessed} (violation {:.3e})",
        r.worst_violation
    ));
    let tracking = pure_tracking_cost();
    let a4 =
        check_assumption(&tracking, Assumption::A4, TRIALS, SEED).map_err(|e| e.to_string())?;
    let ll = check_assumption(&tracking, Assumption::LasryLions, TRIALS, SEED)
        .map_err(|e| e.to_string())?;
    pass &= a4.passed() && !ll.passed();
    notes.push(format!(
        "pure tracking: A4 passes {}, Lasry-Lions flagged {} (violation {:.3e})",
        a4.passed(),
        !ll.passed(),
        ll.worst_violation
    ));
    Ok((pass, notes.join("; ")))
}

fn contraction_monotonicity() -> Verdict {
    let mut means = Vec::new();
    for len in [0.4, 0.2, 0.1] {
        let s = solve(model(lq_cost(), 0.5, len))?;
        let r = s.solution.records.first().ok_or("no contraction record")?;
        means.push(r.mean_ratio().ok_or("fewer than two iterations")?);
    }
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    Ok((
        decreasing,
        format!(
            "mean ratio at lengths 0.4, 0.2, 0.1: {:.5}, {:.5}, {:.5}",
            means[0], means[1], means[2]
        ),
    ))
}

fn wasserstein_brute_force() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    // Atom counts dividing 6, so both sides lift to 6 equal atoms and every
    // coupling is a permutation.
    const SIZES: [usize; 4] = [1, 2, 3, 6];
    for _ in 0..200 {
        let n = SIZES[rng.random_range(0..SIZES.len())];
        let m = SIZES[rng.random_range(0..SIZES.len())];
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fast = wasserstein2(
            &EmpiricalMeasure::from_samples(&a).unwrap(),
            &EmpiricalMeasure::from_samples(&b).unwrap(),
        );
        let brute = common::w2_by_permutations(
            &common::replicate(&a, 6 / n),
            &common::replicate(&b, 6 / m),
        );
        worst = worst.max((fast - brute).abs());
    }
    Ok((
        worst <= 1e-9,
        format!("200 pairs, max |W2 - brute force| = {worst:.2e} (limit 1e-9)"),
    ))
}

fn read_artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "timings.json" {
            continue;
        }
        out.insert(
            name,
            std::fs::read(entry.path()).map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

fn determinism() -> Verdict {
    let config = parse_config(&format!(
        r#"{{
            "model": {{
                "sigma": 0.5, "sigma_tilde": 0.5, "horizon": 1.0,
                "initial": {{"kind": "gaussian", "mean": 0.0, "std": 1.0}},
                "cost": {{"family": "track_mean", "q": 1.0, "q_bar": 1.0, "s": 1.0}}
            }},
            "discretization": {{"steps": 100, "n_common": 64, "n_particles": 2000}},
            "diagnostics": {{"suites": ["oracle"]}},
            "seed": {SEED}
        }}"#
    ))
    .map_err(|e| e.to_string())?;
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for threads in [1, 3] {
        let dir = root.path().join(format!("threads-{threads}"));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let options = RunOptions {
            out: Some(dir.clone()),
            override_assumptions: false,
        };
        pool.install(|| run(&config, Verb::Solve, &options))
            .map_err(|e| e.to_string())?;
        runs.push(read_artifacts(&dir)?);
    }
    let names: Vec<&String> = runs[0].keys().collect();
    let differing: Vec<&String> = names
        .iter()
        .copied()
        .filter(|n| runs[1].get(*n) != runs[0].get(*n))
        .collect();
    let same_set = runs[0].len() == runs[1].len();
    Ok((
        same_set && differing.is_empty() && names.len() >= 6,
        format!(
            "1 vs 3 worker threads: {} artifacts compared, differing: {:?}",
            names.len(),
            differing
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let lq = solve(model(lq_cost(), 0.5, 1.0));
    let pt = solve(model(pure_tracking_cost(), 1.0, 1.0));

    let criteria: Vec<Criterion> = vec![
        (
            "LQ oracle equivalence",
            Box::new(|| lq_oracle_equivalence(&lq)),
        ),
        (
            "sigma_tilde -> 0 reduction",
            Box::new(sigma_tilde_zero_reduction),
        ),
        (
            "conditional-mean martingale",
            Box::new(|| conditional_mean_martingale(&pt)),
        ),
        ("SMP gap", Box::new(|| smp_gaps(&lq))),
        ("exploitability", Box::new(|| exploitability_both(&lq, &pt))),
        ("uniqueness probe", Box::new(uniqueness)),
        ("assumption verifiers", Box::new(assumption_verifiers)),
        (
            "contraction monotonicity",
            Box::new(contraction_monotonicity),
        ),
        ("Wasserstein correctness", Box::new(wasserstein_brute_force)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "{} criterion {:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
