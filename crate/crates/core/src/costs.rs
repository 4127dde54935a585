//! Terminal cost families `g(x, m)` with analytic `g_x`, and randomized
//! probes for the structural assumptions the solver relies on:
//!
//! * A1 – `g_x` Lipschitz in `x`,
//! * A2 – convexity in `x`,
//! * A3 – `g_x` Lipschitz in `m` under `W₂`,
//! * A4 – weak monotonicity in `m` over arbitrary couplings,
//! * Lasry–Lions monotonicity (the double-expectation form).
//!
//! Probes are deterministic given a seed and independent of the number of
//! worker threads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MfgError, Result};
use crate::measures::{wasserstein2, EmpiricalMeasure};
use crate::rng::{keyed, DOMAIN_PROBE};

/// Scalar map `ψ` of the quadratic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarMap {
    Affine { slope: f64, intercept: f64 },
    Sine { amplitude: f64, frequency: f64 },
}

impl ScalarMap {
    pub fn linear(slope: f64) -> Self {
        ScalarMap::Affine {
            slope,
            intercept: 0.0,
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            ScalarMap::Affine { slope, intercept } => slope * y + intercept,
            ScalarMap::Sine {
                amplitude,
                frequency,
            } => amplitude * (frequency * y).sin(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            ScalarMap::Affine { slope, .. } => slope.abs(),
            ScalarMap::Sine {
                amplitude,
                frequency,
            } => (amplitude * frequency).abs(),
        }
    }
}

/// Measure functional `F` of the quadratic family. It enters `g` but not `g_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureFunctional {
    Zero,
    ScaledMean { coef: f64 },
    ScaledSecondMoment { coef: f64 },
}

impl MeasureFunctional {
    fn eval(&self, mean: f64, second: f64) -> f64 {
        match *self {
            MeasureFunctional::Zero => 0.0,
            MeasureFunctional::ScaledMean { coef } => coef * mean,
            MeasureFunctional::ScaledSecondMoment { coef } => coef * second,
        }
    }
}

pub type CostFn = Arc<dyn Fn(f64, &EmpiricalMeasure) -> f64 + Send + Sync>;

/// User-supplied cost. The Lipschitz constant is taken on trust.
#[derive(Clone)]
pub struct CustomCost {
    pub name: String,
    pub g: CostFn,
    pub g_x: CostFn,
    pub lipschitz: f64,
}

impl fmt::Debug for CustomCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCost")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum TerminalCost {
    /// `A x² + x ∫ψ dm + F(m)`.
    Quadratic {
        a: f64,
        psi: ScalarMap,
        f: MeasureFunctional,
    },
    /// `q x² + q̄ (x - s m̄)²`.
    TrackMean {
        q: f64,
        q_bar: f64,
        s: f64,
    },
    /// `∫ (x - y)² dm(y)`.
    MeanSquareDistance,
    /// `a x²`.
    StateOnlyQuadratic {
        a: f64,
    },
    Custom(CustomCost),
}

impl TerminalCost {
    pub fn quadratic(a: f64, psi: ScalarMap, f: MeasureFunctional) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(invalid("a", "must be finite and >= 0"));
        }
        Ok(TerminalCost::Quadratic { a, psi, f })
    }

    pub fn track_mean(q: f64, q_bar: f64, s: f64) -> Result<Self> {
        for (name, v) in [("q", q), ("q_bar", q_bar), ("s", s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, "must be finite and >= 0"));
            }
        }
        Ok(TerminalCost::TrackMean { q, q_bar, s })
    }

    pub fn state_only(a: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(invalid("a", "must be finite and >= 0"));
        }
        Ok(TerminalCost::StateOnlyQuadratic { a })
    }

    pub fn custom(
        name: impl Into<String>,
        g: impl Fn(f64, &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
        g_x: impl Fn(f64, &EmpiricalMeasure) -> f64 + Send + Sync + 'static,
        lipschitz: f64,
    ) -> Self {
        TerminalCost::Custom(CustomCost {
            name: name.into(),
            g: Arc::new(g),
            g_x: Arc::new(g_x),
            lipschitz,
        })
    }

    /// Cost with `g ≡ 0`.
    pub fn zero() -> Self {
        TerminalCost::StateOnlyQuadratic { a: 0.0 }
    }

    pub fn name(&self) -> &str {
        match self {
            TerminalCost::Quadratic { .. } => "quadratic",
            TerminalCost::TrackMean { .. } => "track_mean",
            TerminalCost::MeanSquareDistance => "mean_square_distance",
            TerminalCost::StateOnlyQuadratic { .. } => "state_only_quadratic",
            TerminalCost::Custom(c) => &c.name,
        }
    }

    /// Declared Lipschitz constant `C_g` covering both A1 and A3.
    pub fn lipschitz(&self) -> f64 {
        match self {
            TerminalCost::Quadratic { a, psi, .. } => (2.0 * a).max(psi.lipschitz()),
            TerminalCost::TrackMean { q, q_bar, s } => 2.0 * (q + q_bar) * (1.0 + s),
            TerminalCost::MeanSquareDistance => 2.0,
            TerminalCost::StateOnlyQuadratic { a } => 2.0 * a,
            TerminalCost::Custom(c) => c.lipschitz,
        }
    }

    /// Whether `g_x` does not depend on the measure at all.
    pub fn is_measure_free(&self) -> bool {
        match self {
            TerminalCost::StateOnlyQuadratic { .. } => true,
            TerminalCost::TrackMean { q_bar, s, .. } => *q_bar == 0.0 || *s == 0.0,
            TerminalCost::Quadratic { psi, .. } => psi.lipschitz() == 0.0,
            _ => false,
        }
    }

    /// Precompute the measure statistics this family needs.
    pub fn freeze<'a>(&'a self, m: &'a EmpiricalMeasure) -> FrozenCost<'a> {
        let (mean, second, psi_integral) = match self {
            TerminalCost::Quadratic { psi, .. } => {
                (m.mean(), m.second_moment(), m.integrate(|y| psi.eval(y)))
            }
            TerminalCost::TrackMean { .. } => (m.mean(), 0.0, 0.0),
            TerminalCost::MeanSquareDistance => (m.mean(), m.second_moment(), 0.0),
            _ => (0.0, 0.0, 0.0),
        };
        FrozenCost {
            cost: self,
            measure: m,
            mean,
            second,
            psi_integral,
        }
    }
}

/// A cost with its measure argument fixed.
pub struct FrozenCost<'a> {
    cost: &'a TerminalCost,
    measure: &'a EmpiricalMeasure,
    mean: f64,
    second: f64,
    psi_integral: f64,
}

impl FrozenCost<'_> {
    pub fn g(&self, x: f64) -> f64 {
        match self.cost {
            TerminalCost::Quadratic { a, f, .. } => {
                a * x * x + x * self.psi_integral + f.eval(self.mean, self.second)
            }
            TerminalCost::TrackMean { q, q_bar, s } => {
                let d = x - s * self.mean;
                q * x * x + q_bar * d * d
            }
            TerminalCost::MeanSquareDistance => x * x - 2.0 * x * self.mean + self.second,
            TerminalCost::StateOnlyQuadratic { a } => a * x * x,
            TerminalCost::Custom(c) => (c.g)(x, self.measure),
        }
    }

    pub fn g_x(&self, x: f64) -> f64 {
        match self.cost {
            TerminalCost::Quadratic { a, .. } => 2.0 * a * x + self.psi_integral,
            TerminalCost::TrackMean { q, q_bar, s } => {
                2.0 * (q + q_bar) * x - 2.0 * q_bar * s * self.mean
            }
            TerminalCost::MeanSquareDistance => 2.0 * x - 2.0 * self.mean,
            TerminalCost::StateOnlyQuadratic { a } => 2.0 * a * x,
            TerminalCost::Custom(c) => (c.g_x)(x, self.measure),
        }
    }
}

pub fn eval_g(cost: &TerminalCost, x: f64, m: &EmpiricalMeasure) -> f64 {
    cost.freeze(m).g(x)
}

pub fn eval_gx(cost: &TerminalCost, x: f64, m: &EmpiricalMeasure) -> f64 {
    cost.freeze(m).g_x(x)
}

// ---------------------------------------------------------------------------
// Assumption probes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assumption {
    A1,
    A2,
    A3,
    A4,
    LasryLions,
}

impl Assumption {
    pub const ALL: [Assumption; 5] = [
        Assumption::A1,
        Assumption::A2,
        Assumption::A3,
        Assumption::A4,
        Assumption::LasryLions,
    ];

    fn key(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::A1 => "A1",
            Assumption::A2 => "A2",
            Assumption::A3 => "A3",
            Assumption::A4 => "A4",
            Assumption::LasryLions => "LasryLions",
        };
        f.write_str(s)
    }
}

impl FromStr for Assumption {
    type Err = MfgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Assumption::A1),
            "a2" => Ok(Assumption::A2),
            "a3" => Ok(Assumption::A3),
            "a4" => Ok(Assumption::A4),
            "lasrylions" | "lasry_lions" | "lasry-lions" | "ll" => Ok(Assumption::LasryLions),
            _ => Err(MfgError::UnknownAssumption(s.to_string())),
        }
    }
}

/// Inputs at which a probe found its worst violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    StatePair {
        x: f64,
        x_prime: f64,
        measure: Vec<f64>,
    },
    MeasurePair {
        x: f64,
        measure: Vec<f64>,
        measure_prime: Vec<f64>,
    },
    /// `xi[i]` is coupled with `xi_prime[i]`.
    CoupledClouds {
        xi: Vec<f64>,
        xi_prime: Vec<f64>,
    },
    Clouds {
        xi: Vec<f64>,
        xi_prime: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub assumption: Assumption,
    /// Largest violation found; `0` when none exceeded the tolerance.
    pub worst_violation: f64,
    pub witness: Option<Witness>,
    pub trials: usize,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.worst_violation == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// States and atoms are drawn from `[-radius, radius]`.
    pub radius: f64,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Random permutation couplings tested per A4 probe, on top of the
    /// quantile coupling.
    pub random_couplings: usize,
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            min_atoms: 2,
            max_atoms: 32,
            random_couplings: 8,
            tolerance: 1e-9,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(invalid("radius", "must be > 0"));
        }
        if self.min_atoms == 0 || self.max_atoms < self.min_atoms {
            return Err(invalid("max_atoms", "need 1 <= min_atoms <= max_atoms"));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(invalid("tolerance", "must be >= 0"));
        }
        Ok(())
    }

    fn state(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-self.radius..=self.radius)
    }

    fn cloud_of(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.state(rng)).collect()
    }

    fn cloud(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = rng.random_range(self.min_atoms..=self.max_atoms);
        self.cloud_of(rng, n)
    }

    /// Either an independent cloud or a translate of `base`. Translates
    /// realize `W₂ = |Δ mean|`, where mean-dependent costs are tightest.
    fn partner_cloud(&self, rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
        if rng.random_bool(0.5) {
            self.cloud(rng)
        } else {
            let shift = rng.random_range(-self.radius / 2.0..=self.radius / 2.0);
            base.iter().map(|v| v + shift).collect()
        }
    }
}

fn measure(v: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::from_samples(v).expect("probe clouds are finite and non-empty")
}

pub fn check_assumption(
    cost: &TerminalCost,
    which: Assumption,
    trials: usize,
    rng_seed: u64,
) -> Result<AssumptionReport> {
    check_assumption_with(cost, which, trials, rng_seed, &ProbeConfig::default())
}

pub fn check_assumption_with(
    cost: &TerminalCost,
    which: Assumption,
    trials: usize,
    rng_seed: u64,
    probe: &ProbeConfig,
) -> Result<AssumptionReport> {
    if trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    probe.validate()?;
    let tol = probe.tolerance;
    let outcomes: Vec<Option<(f64, Witness)>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = keyed(rng_seed, DOMAIN_PROBE, which.key(), trial as u64);
            let (v, w) = probe_once(cost, which, probe, &mut rng);
            (v > tol).then_some((v, w))
        })
        .collect();
    let mut worst: Option<(f64, Witness)> = None;
    for (v, w) in outcomes.into_iter().flatten() {
        if worst.as_ref().is_none_or(|(best, _)| v > *best) {
            worst = Some((v, w));
        }
    }
    Ok(match worst {
        Some((v, w)) => AssumptionReport {
            assumption: which,
            worst_violation: v,
            witness: Some(w),
            trials,
        },
        None => AssumptionReport {
            assumption: which,
            worst_violation: 0.0,
            witness: None,
            trials,
        },
    })
}

/// Violation magnitude of one randomized probe (positive means violated).
fn probe_once(
    cost: &TerminalCost,
    which: Assumption,
    probe: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> (f64, Witness) {
    let c_g = cost.lipschitz();
    match which {
        Assumption::A1 | Assumption::A2 => {
            let x = probe.state(rng);
            let x_prime = probe.state(rng);
            let cloud = probe.cloud(rng);
            let m = measure(&cloud);
            let frozen = cost.freeze(&m);
            let dg = frozen.g_x(x) - frozen.g_x(x_prime);
            let v = if which == Assumption::A1 {
                dg.abs() - c_g * (x - x_prime).abs()
            } else {
                -dg * (x - x_prime)
            };
            (
                v,
                Witness::StatePair {
                    x,
                    x_prime,
                    measure: cloud,
                },
            )
        }
        Assumption::A3 => {
            let x = probe.state(rng);
            let cloud = probe.cloud(rng);
            let cloud_prime = probe.partner_cloud(rng, &cloud);
            let (m, mp) = (measure(&cloud), measure(&cloud_prime));
            let dg = eval_gx(cost, x, &m) - eval_gx(cost, x, &mp);
            let v = dg.abs() - c_g * wasserstein2(&m, &mp);
            (
                v,
                Witness::MeasurePair {
                    x,
                    measure: cloud,
                    measure_prime: cloud_prime,
                },
            )
        }
        Assumption::A4 => {
            let n = rng.random_range(probe.min_atoms..=probe.max_atoms);
            let mut xi = probe.cloud_of(rng, n);
            let mut xi_prime = probe.cloud_of(rng, n);
            let (m, mp) = (measure(&xi), measure(&xi_prime));
            let (f, fp) = (cost.freeze(&m), cost.freeze(&mp));
            let coupled = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (f.g_x(x) - fp.g_x(y)) * (x - y))
                    .sum::<f64>()
                    / n as f64
            };
            // quantile coupling first, then random permutations
            xi.sort_by(f64::total_cmp);
            xi_prime.sort_by(f64::total_cmp);
            let mut worst = (-coupled(&xi, &xi_prime), xi_prime.clone());
            for _ in 0..probe.random_couplings {
                xi_prime.shuffle(rng);
                let v = -coupled(&xi, &xi_prime);
                if v > worst.0 {
                    worst = (v, xi_prime.clone());
                }
            }
            (
                worst.0,
                Witness::CoupledClouds {
                    xi,
                    xi_prime: worst.1,
                },
            )
        }
        Assumption::LasryLions => {
            let xi = probe.cloud(rng);
            let xi_prime = probe.partner_cloud(rng, &xi);
            let (m, mp) = (measure(&xi), measure(&xi_prime));
            let (f, fp) = (cost.freeze(&m), cost.freeze(&mp));
            let mean_of = |v: &[f64], g: &dyn Fn(f64) -> f64| {
                v.iter().map(|&x| g(x)).sum::<f64>() / v.len() as f64
            };
            let value = mean_of(&xi_prime, &|x| fp.g(x)) + mean_of(&xi, &|x| f.g(x))
                - mean_of(&xi, &|x| fp.g(x))
                - mean_of(&xi_prime, &|x| f.g(x));
            (-value, Witness::Clouds { xi, xi_prime })
        }
    }
}

/// Empirical Lipschitz constants of `g_x` in `x` and in `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub in_x: f64,
    pub in_m: f64,
}

impl LipschitzEstimate {
    pub fn overall(&self) -> f64 {
        self.in_x.max(self.in_m)
    }
}

pub fn lipschitz_estimate(
    cost: &TerminalCost,
    trials: usize,
    rng_seed: u64,
) -> Result<LipschitzEstimate> {
    if trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    let probe = ProbeConfig::default();
    let quotients: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = keyed(rng_seed, DOMAIN_PROBE, 0x11b, trial as u64);
            let x = probe.state(&mut rng);
            let x_prime = probe.state(&mut rng);
            let cloud = probe.cloud(&mut rng);
            let cloud_prime = probe.partner_cloud(&mut rng, &cloud);
            let (m, mp) = (measure(&cloud), measure(&cloud_prime));
            let f = cost.freeze(&m);
            let qx = quotient(f.g_x(x) - f.g_x(x_prime), x - x_prime);
            let qm = quotient(f.g_x(x) - cost.freeze(&mp).g_x(x), wasserstein2(&m, &mp));
            (qx, qm)
        })
        .collect();
    Ok(quotients.into_iter().fold(
        LipschitzEstimate {
            in_x: 0.0,
            in_m: 0.0,
        },
        |acc, (qx, qm)| LipschitzEstimate {
            in_x: acc.in_x.max(qx),
            in_m: acc.in_m.max(qm),
        },
    ))
}

fn quotient(num: f64, den: f64) -> f64 {
    if den.abs() < 1e-9 {
        0.0
    } else {
        (num / den).abs()
    }
}
