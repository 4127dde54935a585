//! Experiment configuration: one JSON document declaring the model, the
//! discretization, the solver, the diagnostic suites, the seed and the output
//! directory.
//!
//! Unknown keys are rejected with the full key path and, when one is close
//! enough, a suggestion. Validation errors name the offending key the same
//! way (`model.sigma_tilde`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditional::{Feature, RegressionBasis, DEFAULT_RIDGE};
use crate::costs::{MeasureFunctional, ProbeConfig, ScalarMap, TerminalCost};
use crate::error::{MfgError, Result};
use crate::fbsde::Volatility;
use crate::mfg::{Discretization, MfgModel, SolverConfig};
use crate::paths::InitialDistribution;

/// Time steps per unit of horizon when `discretization.steps` is omitted.
pub const STEPS_PER_UNIT_TIME: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sigma: f64,
    pub sigma_tilde: f64,
    pub horizon: f64,
    #[serde(default = "default_initial")]
    pub initial: InitialDistribution,
    pub cost: CostConfig,
}

fn default_initial() -> InitialDistribution {
    InitialDistribution::Gaussian {
        mean: 0.0,
        std: 1.0,
    }
}

/// Terminal cost families that can be declared in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    Quadratic {
        a: f64,
        psi: ScalarMap,
        #[serde(default = "zero_functional")]
        f: MeasureFunctional,
    },
    TrackMean {
        q: f64,
        q_bar: f64,
        s: f64,
    },
    MeanSquareDistance,
    StateOnlyQuadratic {
        a: f64,
    },
}

fn zero_functional() -> MeasureFunctional {
    MeasureFunctional::Zero
}

impl CostConfig {
    pub fn build(&self) -> Result<TerminalCost> {
        Ok(match self {
            CostConfig::Quadratic { a, psi, f } => {
                TerminalCost::quadratic(*a, psi.clone(), f.clone())?
            }
            CostConfig::TrackMean { q, q_bar, s } => TerminalCost::track_mean(*q, *q_bar, *s)?,
            CostConfig::MeanSquareDistance => TerminalCost::MeanSquareDistance,
            CostConfig::StateOnlyQuadratic { a } => TerminalCost::state_only(*a)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedBasis {
    Constant,
    Affine,
    Extended,
}

/// Either a named basis or an explicit feature list such as
/// `["1", "x", "mean"]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisConfig {
    Named(NamedBasis),
    Features(Vec<Feature>),
}

impl BasisConfig {
    fn features(&self) -> Vec<Feature> {
        match self {
            BasisConfig::Named(NamedBasis::Constant) => RegressionBasis::constant().features,
            BasisConfig::Named(NamedBasis::Affine) => RegressionBasis::affine().features,
            BasisConfig::Named(NamedBasis::Extended) => RegressionBasis::extended().features,
            BasisConfig::Features(f) => f.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    /// Defaults to 100 steps per unit of horizon.
    pub steps: Option<usize>,
    pub n_common: usize,
    pub n_particles: usize,
    pub basis: BasisConfig,
    pub ridge: f64,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            steps: None,
            n_common: 64,
            n_particles: 2000,
            basis: BasisConfig::Named(NamedBasis::Affine),
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Randomized A1–A4 and Lasry–Lions probes; A1–A4 also gate the solve.
    Assumptions,
    Smp,
    Exploitability,
    Uniqueness,
    Oracle,
    /// Conditional-mean martingale check (meaningful when `c ≡ 0`).
    MeanMartingale,
    /// Cross-scenario spread of the conditional flow (meaningful when `σ̃ = 0`).
    FlowSpread,
    Apriori,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub suites: Vec<Suite>,
    pub assumption_trials: usize,
    pub probe: ProbeConfig,
    pub perturbations: usize,
    pub perturbation_amplitude: f64,
    pub uniqueness_starts: Vec<f64>,
    /// Also write every particle path to `paths.csv`.
    pub write_paths: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            suites: vec![
                Suite::Assumptions,
                Suite::Smp,
                Suite::Exploitability,
                Suite::Oracle,
            ],
            assumption_trials: 10_000,
            probe: ProbeConfig::default(),
            perturbations: 20,
            perturbation_amplitude: 0.5,
            uniqueness_starts: vec![-1.0, 0.0, 1.0],
            write_paths: false,
        }
    }
}

impl DiagnosticsConfig {
    pub fn wants(&self, suite: Suite) -> bool {
        self.suites.contains(&suite)
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> MfgError {
    MfgError::InvalidParameter {
        name: key.to_string(),
        reason: reason.to_string(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite and > 0 (got {v})")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite and >= 0 (got {v})")))
    }
}

/// Re-label an error from a sub-validator with the config section.
fn scoped(section: &str, e: MfgError) -> MfgError {
    match e {
        MfgError::InvalidParameter { name, reason } => MfgError::InvalidParameter {
            name: format!("{section}.{name}"),
            reason,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Fill derived defaults (`steps`) in place.
    pub fn resolve(&mut self) {
        if self.discretization.steps.is_none() && self.model.horizon.is_finite() {
            let steps = (STEPS_PER_UNIT_TIME * self.model.horizon).round().max(1.0);
            self.discretization.steps = Some(steps as usize);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        non_negative("model.sigma", m.sigma)?;
        non_negative("model.sigma_tilde", m.sigma_tilde)?;
        positive("model.horizon", m.horizon)?;
        m.initial
            .validate()
            .map_err(|e| scoped("model.initial", e))?;
        match &m.cost {
            CostConfig::Quadratic { a, psi, f } => {
                non_negative("model.cost.a", *a)?;
                let psi_ok = match *psi {
                    ScalarMap::Affine { slope, intercept } => {
                        slope.is_finite() && intercept.is_finite()
                    }
                    ScalarMap::Sine {
                        amplitude,
                        frequency,
                    } => amplitude.is_finite() && frequency.is_finite(),
                };
                if !psi_ok {
                    return Err(bad("model.cost.psi", "parameters must be finite"));
                }
                let f_ok = match *f {
                    MeasureFunctional::Zero => true,
                    MeasureFunctional::ScaledMean { coef }
                    | MeasureFunctional::ScaledSecondMoment { coef } => coef.is_finite(),
                };
                if !f_ok {
                    return Err(bad("model.cost.f.coef", "must be finite"));
                }
            }
            CostConfig::TrackMean { q, q_bar, s } => {
                non_negative("model.cost.q", *q)?;
                non_negative("model.cost.q_bar", *q_bar)?;
                non_negative("model.cost.s", *s)?;
            }
            CostConfig::StateOnlyQuadratic { a } => non_negative("model.cost.a", *a)?,
            CostConfig::MeanSquareDistance => {}
        }

        let d = &self.discretization;
        if d.steps == Some(0) {
            return Err(bad("discretization.steps", "must be >= 1"));
        }
        if d.n_common == 0 {
            return Err(bad("discretization.n_common", "must be >= 1"));
        }
        if d.n_particles == 0 {
            return Err(bad("discretization.n_particles", "must be >= 1"));
        }
        non_negative("discretization.ridge", d.ridge)?;
        RegressionBasis::new(d.basis.features(), d.ridge)
            .map_err(|e| scoped("discretization.basis", e))?;

        self.solver.validate().map_err(|e| scoped("solver", e))?;

        let g = &self.diagnostics;
        if g.assumption_trials == 0 {
            return Err(bad("diagnostics.assumption_trials", "must be >= 1"));
        }
        g.probe
            .validate()
            .map_err(|e| scoped("diagnostics.probe", e))?;
        positive(
            "diagnostics.perturbation_amplitude",
            g.perturbation_amplitude,
        )?;
        if g.wants(Suite::Uniqueness) && g.uniqueness_starts.len() < 2 {
            return Err(bad(
                "diagnostics.uniqueness_starts",
                "need at least two initial guesses",
            ));
        }
        if g.uniqueness_starts.iter().any(|s| !s.is_finite()) {
            return Err(bad("diagnostics.uniqueness_starts", "must be finite"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<MfgModel> {
        let m = &self.model;
        Ok(MfgModel {
            cost: m.cost.build().map_err(|e| scoped("model.cost", e))?,
            vol: Volatility::new(m.sigma, m.sigma_tilde).map_err(|e| scoped("model", e))?,
            horizon: m.horizon,
            initial: m.initial.clone(),
        })
    }

    pub fn discretization(&self) -> Result<Discretization> {
        let d = &self.discretization;
        let steps = match d.steps {
            Some(s) => s,
            None => (STEPS_PER_UNIT_TIME * self.model.horizon).round().max(1.0) as usize,
        };
        Ok(Discretization {
            steps,
            n_common: d.n_common,
            n_particles: d.n_particles,
            basis: RegressionBasis::new(d.basis.features(), d.ridge)
                .map_err(|e| scoped("discretization.basis", e))?,
        })
    }

    /// Canonical JSON of the resolved config, as echoed into the output.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse, resolve defaults and validate.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut config: ExperimentConfig =
        serde_path_to_error::deserialize(de).map_err(|e| describe(text, e))?;
    config.resolve();
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MfgError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn describe(text: &str, err: serde_path_to_error::Error<serde_json::Error>) -> MfgError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let (line, column) = (inner.line(), inner.column());
    let message = inner.to_string();
    // serde_json appends " at line L column C"; we report it ourselves.
    let message = match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message,
    };
    let mut out = if let Some((unknown, expected)) = unknown_key(&message) {
        let parent = match path.rsplit_once('.') {
            Some((p, last)) if last == unknown => p.to_string(),
            _ if path == unknown || path == "." => String::new(),
            _ => path.clone(),
        };
        let full = |k: &str| {
            if parent.is_empty() {
                k.to_string()
            } else {
                format!("{parent}.{k}")
            }
        };
        let mut s = format!("unknown key `{}`", full(&unknown));
        if let Some(best) = suggest(&unknown, &expected) {
            s.push_str(&format!("; did you mean `{}`?", full(&best)));
        } else if !expected.is_empty() {
            s.push_str(&format!("; expected one of {}", expected.join(", ")));
        }
        s
    } else if path.is_empty() || path == "." {
        message
    } else {
        format!("`{path}`: {message}")
    };
    if line > 0 {
        out.push_str(&format!(" (line {line}, column {column})"));
        if let Some(src) = text.lines().nth(line - 1) {
            out.push_str(&format!("\n  {line} | {}", src.trim_end()));
        }
    }
    MfgError::Config(out)
}

/// Split serde's "unknown field `x`, expected one of `a`, `b`" (or the
/// variant equivalent) into the key and the candidates.
fn unknown_key(message: &str) -> Option<(String, Vec<String>)> {
    let rest = message
        .strip_prefix("unknown field `")
        .or_else(|| message.strip_prefix("unknown variant `"))?;
    let end = rest.find('`')?;
    let key = rest[..end].to_string();
    let expected = rest[end + 1..]
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect();
    Some((key, expected))
}

fn suggest(unknown: &str, candidates: &[String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(unknown, c), c))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone())
}
