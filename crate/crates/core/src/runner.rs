//! Config-driven pipeline: assumption gate, solve, diagnostics, artifacts.
//!
//! Every artifact carries the seed and the config hash: CSV files as a
//! leading `# seed=…, config_hash=…` comment, JSON files as top-level
//! fields. All numeric artifacts are byte-identical for a given config and
//! seed regardless of the worker count. Wall-clock times are therefore kept
//! out of them and written to `timings.json`.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Suite};
use crate::costs::{check_assumption_with, Assumption, AssumptionReport};
use crate::diagnostics::{
    apriori_ratio, exploitability, flow_spread, mean_martingale_check, oracle_deviation,
    oracle_for, random_perturbations, smp_gap, LqOracle,
};
use crate::error::{MfgError, Result};
use crate::mfg::{
    solve_mfg, uniqueness_probe, ContractionRecord, Discretization, Ensemble, MfgModel, MfgSolution,
};
use crate::paths::{conditional_flow, PathEnsemble};

/// Assumptions that must hold for the solve to proceed.
pub const GATED: [Assumption; 4] = [
    Assumption::A1,
    Assumption::A2,
    Assumption::A3,
    Assumption::A4,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    /// Assumption probes only.
    Check,
    Solve,
    /// Solve and compare with the closed-form oracle.
    Bench,
    ProbeUniqueness,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Check => "check",
            Verb::Solve => "solve",
            Verb::Bench => "bench",
            Verb::ProbeUniqueness => "probe-uniqueness",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `config.output`.
    pub out: Option<PathBuf>,
    /// Report failed assumptions but solve anyway.
    pub override_assumptions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    GateFailed,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub status: RunStatus,
    pub artifacts: Vec<String>,
    pub reports: Value,
}

struct Artifacts {
    dir: PathBuf,
    seed: u64,
    hash: String,
    written: Vec<String>,
}

impl Artifacts {
    fn stamp(&self) -> String {
        format!("# seed={}, config_hash={}\n", self.seed, self.hash)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let stamped = format!("{}{body}", self.stamp());
        self.text(name, &stamped)
    }

    fn json(&mut self, name: &str, mut value: Value) -> Result<()> {
        if let Value::Object(map) = &mut value {
            map.insert("seed".into(), json!(self.seed));
            map.insert("config_hash".into(), json!(self.hash));
        }
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn paths_csv(&mut self, paths: &PathEnsemble) -> Result<()> {
        use std::io::Write;
        let name = "paths.csv";
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        w.write_all(self.stamp().as_bytes())?;
        paths.write_csv(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }
}

#[derive(Default)]
struct Timings(Vec<(&'static str, f64)>);

impl Timings {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.0.push((stage, t.elapsed().as_secs_f64()));
        out
    }
}

pub fn assumption_reports(
    config: &ExperimentConfig,
    model: &MfgModel,
    which: &[Assumption],
) -> Result<Vec<AssumptionReport>> {
    which
        .iter()
        .map(|&a| {
            check_assumption_with(
                &model.cost,
                a,
                config.diagnostics.assumption_trials,
                config.seed,
                &config.diagnostics.probe,
            )
        })
        .collect()
}

pub fn convergence_csv(records: &[ContractionRecord]) -> String {
    let mut s = String::from(
        "interval,phase,start_time,end_time,iteration,ratio,residual,inner_iterations\n",
    );
    for (n, r) in records.iter().enumerate() {
        let phase = match r.phase {
            crate::mfg::Phase::Single => "single",
            crate::mfg::Phase::Backward => "backward",
            crate::mfg::Phase::Forward => "forward",
        };
        for (it, res) in r.residuals.iter().enumerate() {
            let ratio = if it == 0 {
                String::new()
            } else {
                format!("{:e}", r.ratios[it - 1])
            };
            let _ = writeln!(
                s,
                "{n},{phase},{},{},{},{ratio},{res:e},{}",
                r.start_time,
                r.end_time,
                it + 1,
                r.inner_iterations.get(it).copied().unwrap_or(0)
            );
        }
    }
    s
}

pub fn flow_csv(paths: &PathEnsemble) -> String {
    let grid = paths.grid();
    let mut s = String::from("scenario,node,time,mean,second_moment\n");
    for i in 0..paths.n_common() {
        for k in 0..grid.nodes() {
            let (m, m2) = paths.moments(i, k);
            let _ = writeln!(s, "{i},{k},{},{m:e},{m2:e}", grid.time(k));
        }
    }
    s
}

pub fn control_json(solution: &MfgSolution) -> Value {
    let c = &solution.control;
    let grid = c.grid();
    let rows: Vec<&[f64]> = (0..grid.nodes()).map(|k| c.row(k)).collect();
    json!({
        "basis": c.basis(),
        "times": (0..grid.nodes()).map(|k| grid.time(k)).collect::<Vec<_>>(),
        "coefficients": rows,
        "intervals": solution.intervals,
        "interfaces": solution.interfaces,
    })
}

fn diagnostics(
    config: &ExperimentConfig,
    model: &MfgModel,
    ensemble: &Ensemble,
    solution: &MfgSolution,
    suites: &[Suite],
    reports: &mut serde_json::Map<String, Value>,
    oracle: Option<&LqOracle>,
) -> Result<()> {
    let d = &config.diagnostics;
    let noise = ensemble.noise.full();
    let terminal = conditional_flow(&solution.paths).terminal_measures();
    if suites.contains(&Suite::Smp) {
        let betas = random_perturbations(
            &solution.control,
            d.perturbations,
            d.perturbation_amplitude,
            config.seed,
        )?;
        let gaps = betas
            .iter()
            .map(|b| {
                smp_gap(
                    &solution.control,
                    b,
                    model,
                    &ensemble.init,
                    &noise,
                    &terminal,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = gaps
            .iter()
            .map(|g| g.gap / g.stderr.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min);
        reports.insert(
            "smp".into(),
            json!({ "gaps": gaps, "worst_gap_in_stderr": worst }),
        );
    }
    if suites.contains(&Suite::Exploitability) {
        let e = exploitability(&solution.control, model, ensemble, &config.solver.inner)?;
        reports.insert("exploitability".into(), serde_json::to_value(e)?);
    }
    if suites.contains(&Suite::Oracle) {
        let value = match oracle {
            Some(o) => {
                serde_json::to_value(oracle_deviation(&solution.control, &solution.paths, o)?)?
            }
            None => json!({ "available": false }),
        };
        reports.insert("oracle".into(), value);
    }
    if suites.contains(&Suite::MeanMartingale) {
        let r = mean_martingale_check(&solution.paths, ensemble, model);
        reports.insert("mean_martingale".into(), serde_json::to_value(r)?);
    }
    if suites.contains(&Suite::FlowSpread) {
        let (spread, mc) = flow_spread(&solution.paths);
        reports.insert(
            "flow_spread".into(),
            json!({ "w2_spread": spread, "mc_scale": mc, "ratio": spread / mc.max(f64::MIN_POSITIVE) }),
        );
    }
    if suites.contains(&Suite::Apriori) {
        let r = apriori_ratio(&solution.control, &solution.paths, model);
        reports.insert("apriori".into(), serde_json::to_value(r)?);
    }
    if suites.contains(&Suite::Uniqueness) {
        let disc = config.discretization()?;
        let r = uniqueness_probe(model, &disc, &config.solver, ensemble, &d.uniqueness_starts)?;
        reports.insert("uniqueness".into(), serde_json::to_value(r)?);
    }
    Ok(())
}

/// Execute `verb` for `config`, writing artifacts into the output
/// directory. Returns an error (after writing the manifest) when the
/// assumption gate fails or the solver aborts.
pub fn run(config: &ExperimentConfig, verb: Verb, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let dir = options.out.clone().unwrap_or_else(|| config.output.clone());
    fs::create_dir_all(&dir)?;
    let mut art = Artifacts {
        dir: dir.clone(),
        seed: config.seed,
        hash: config.hash(),
        written: Vec::new(),
    };
    let mut timings = Timings::default();
    let started = Instant::now();
    let mut echo = config.to_json();
    echo.push('\n');
    art.text("config.json", &echo)?;

    let model = config.model()?;
    let disc = config.discretization()?;
    let mut reports = serde_json::Map::new();
    reports.insert("verb".into(), json!(verb.name()));

    let outcome = pipeline(
        config,
        verb,
        options,
        &model,
        &disc,
        &mut art,
        &mut timings,
        &mut reports,
    );
    let (status, error) = match &outcome {
        Ok(()) => (RunStatus::Complete, None),
        Err(e @ MfgError::AssumptionGate(_)) => (RunStatus::GateFailed, Some(e.to_string())),
        Err(e) => (RunStatus::Aborted, Some(e.to_string())),
    };
    let reports = Value::Object(reports);
    art.json("reports.json", reports.clone())?;

    timings.0.push(("total", started.elapsed().as_secs_f64()));
    let stages: serde_json::Map<String, Value> = timings
        .0
        .iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    art.json("timings.json", json!({ "wall_seconds": stages }))?;

    let mut artifacts = art.written.clone();
    artifacts.push("manifest.json".into());
    let manifest = json!({
        "tool": "mfgcn",
        "verb": verb.name(),
        "status": status,
        "partial": status != RunStatus::Complete,
        "error": error,
        "versions": {
            "mfg_core": env!("CARGO_PKG_VERSION"),
            "artifact_format": 1,
        },
        "override_assumptions": options.override_assumptions,
        "artifacts": artifacts,
        "wall_times": "timings.json",
        "config": serde_json::from_str::<Value>(&echo)?,
    });
    art.json("manifest.json", manifest)?;

    outcome.map(|()| RunSummary {
        out_dir: dir,
        status,
        artifacts,
        reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn pipeline(
    config: &ExperimentConfig,
    verb: Verb,
    options: &RunOptions,
    model: &MfgModel,
    disc: &Discretization,
    art: &mut Artifacts,
    timings: &mut Timings,
    reports: &mut serde_json::Map<String, Value>,
) -> Result<()> {
    let suites = &config.diagnostics.suites;
    let probe_all = verb == Verb::Check || suites.contains(&Suite::Assumptions);
    let gate_active = !options.override_assumptions || verb == Verb::Check;
    if probe_all || gate_active {
        let which: &[Assumption] = if probe_all { &Assumption::ALL } else { &GATED };
        let found = timings.time("assumptions", || assumption_reports(config, model, which))?;
        let failed: Vec<String> = found
            .iter()
            .filter(|r| GATED.contains(&r.assumption) && !r.passed())
            .map(|r| format!("{} (worst violation {:e})", r.assumption, r.worst_violation))
            .collect();
        reports.insert("assumptions".into(), serde_json::to_value(&found)?);
        if !failed.is_empty() && gate_active {
            return Err(MfgError::AssumptionGate(format!(
                "{} violated by `{}`; rerun with --override-assumptions to solve anyway",
                failed.join(", "),
                model.cost.name()
            )));
        }
    }
    if verb == Verb::Check {
        return Ok(());
    }

    let ensemble = timings.time("sample", || Ensemble::sample(model, disc, config.seed))?;
    if verb == Verb::ProbeUniqueness {
        let r = timings.time("uniqueness", || {
            uniqueness_probe(
                model,
                disc,
                &config.solver,
                &ensemble,
                &config.diagnostics.uniqueness_starts,
            )
        })?;
        reports.insert("uniqueness".into(), serde_json::to_value(r)?);
        return Ok(());
    }

    let oracle = oracle_for(&model.cost, model.horizon, &ensemble.grid());
    if verb == Verb::Bench && oracle.is_none() {
        return Err(MfgError::Config(format!(
            "no closed-form oracle for cost `{}`",
            model.cost.name()
        )));
    }
    let solution = timings.time("solve", || {
        solve_mfg(model, disc, &config.solver, &ensemble)
    })?;
    art.csv("convergence.csv", &convergence_csv(&solution.records))?;
    art.json("control.json", control_json(&solution))?;
    art.csv("flow.csv", &flow_csv(&solution.paths))?;
    if config.diagnostics.write_paths {
        art.paths_csv(&solution.paths)?;
    }
    if let Some(o) = &oracle {
        art.csv("oracle.csv", &o.to_csv())?;
    }
    let suites: Vec<Suite> = if verb == Verb::Bench {
        vec![Suite::Oracle]
    } else {
        suites.clone()
    };
    timings.time("diagnostics", || {
        diagnostics(
            config,
            model,
            &ensemble,
            &solution,
            &suites,
            reports,
            oracle.as_ref(),
        )
    })
}

/// Read back a JSON artifact.
pub fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
