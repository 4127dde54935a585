//! The outer fixed point: `Φ(α̂)` = best response to the conditional flow
//! generated by `α̂`, iterated with damping, with interval splitting when the
//! iteration does not contract.
//!
//! Long horizons are handled by backward continuation. The rightmost
//! interval ends with `g_x`; each solved interval leaves a fitted decoupling
//! field `u(x, m̄, m₂) ≈ Y_s` at its left end, which becomes the terminal
//! condition of the next interval to the left. Once time 0 is reached, one
//! forward sweep re-solves each interval from the realized clouds.

use serde::{Deserialize, Serialize};

use crate::conditional::{LinearFit, RegressionBasis};
use crate::costs::TerminalCost;
use crate::error::{invalid, MfgError, Result};
use crate::fbsde::{solve_inner, FbsdeSolution, FrozenTerminal, InnerConfig, Volatility};
use crate::paths::{
    conditional_flow, propagate, sample_initial, sample_noise, ControlField, InitialDistribution,
    NoiseEnsemble, NoiseWindow, PathEnsemble, TimeGrid,
};

#[derive(Debug, Clone)]
pub struct MfgModel {
    pub cost: TerminalCost,
    pub vol: Volatility,
    pub horizon: f64,
    pub initial: InitialDistribution,
}

impl MfgModel {
    pub fn validate(&self) -> Result<()> {
        Volatility::new(self.vol.sigma, self.vol.sigma_tilde)?;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(invalid("horizon", "must be finite and > 0"));
        }
        self.initial.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub steps: usize,
    pub n_common: usize,
    pub n_particles: usize,
    pub basis: RegressionBasis,
}

impl Discretization {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        if self.n_common == 0 {
            return Err(invalid("n_common", "must be >= 1"));
        }
        if self.n_particles == 0 {
            return Err(invalid("n_particles", "must be >= 1"));
        }
        self.basis.validate()
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::new(0.0, horizon, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub damping: f64,
    /// Relative H² tolerance of the outer iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// Split when the observed ratio stays at or above this value ...
    pub split_ratio: f64,
    /// ... for this many consecutive iterations.
    pub split_patience: usize,
    /// Constant initial guess `α⁰`.
    pub start: f64,
    pub inner: InnerConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-4,
            max_iter: 200,
            split_ratio: 0.9,
            split_patience: 5,
            start: 0.0,
            inner: InnerConfig {
                tol: 1e-5,
                ..InnerConfig::default()
            },
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid("damping", "must lie in (0, 1]"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(invalid("tol", "must be finite and > 0"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter", "must be >= 1"));
        }
        if !(self.split_ratio.is_finite() && self.split_ratio > 0.0) {
            return Err(invalid("split_ratio", "must be finite and > 0"));
        }
        if self.split_patience == 0 {
            return Err(invalid("split_patience", "must be >= 1"));
        }
        if !self.start.is_finite() {
            return Err(invalid("start", "must be finite"));
        }
        self.inner.validate()
    }
}

/// Noise and initial states shared by every solve of one experiment.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub noise: NoiseEnsemble,
    pub init: Vec<f64>,
}

impl Ensemble {
    pub fn sample(model: &MfgModel, disc: &Discretization, seed: u64) -> Result<Self> {
        model.validate()?;
        disc.validate()?;
        let grid = disc.grid(model.horizon)?;
        Ok(Self {
            noise: sample_noise(disc.n_common, disc.n_particles, grid, seed)?,
            init: sample_initial(&model.initial, disc.n_common, disc.n_particles, seed)?,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        *self.noise.grid()
    }
}

/// `‖α₁ − α₂‖_{H²}` along `paths`: square root of the ensemble average of
/// `Σ_k (α₁ − α₂)²(t_k, X_k, m̄_k, m₂_k) dt` over the left-point nodes.
pub fn h2_distance(a: &ControlField, b: &ControlField, paths: &PathEnsemble) -> Result<f64> {
    if !a.grid().same_as(b.grid()) || !a.grid().same_as(paths.grid()) {
        return Err(MfgError::ShapeMismatch(
            "controls and paths must share a grid".into(),
        ));
    }
    Ok(h2_sum(paths, |k, m, m2| {
        let (p, q) = (a.collapse(k, m, m2), b.collapse(k, m, m2));
        [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
    })
    .sqrt())
}

/// `‖α‖_{H²}` along `paths`.
pub fn h2_norm(a: &ControlField, paths: &PathEnsemble) -> Result<f64> {
    if !a.grid().same_as(paths.grid()) {
        return Err(MfgError::ShapeMismatch(
            "control and paths must share a grid".into(),
        ));
    }
    Ok(h2_sum(paths, |k, m, m2| a.collapse(k, m, m2)).sqrt())
}

/// `‖α₁ − α₂‖ / max(‖α₁‖, 1e-8)`.
pub fn h2_relative(a: &ControlField, b: &ControlField, paths: &PathEnsemble) -> Result<f64> {
    Ok(h2_distance(a, b, paths)? / h2_norm(a, paths)?.max(1e-8))
}

/// `E Σ_k f_k(X_k)² dt` for per-(scenario, node) quadratics `f_k`, computed
/// from the clouds' power sums.
fn h2_sum<F>(paths: &PathEnsemble, f: F) -> f64
where
    F: Fn(usize, f64, f64) -> [f64; 3],
{
    let grid = paths.grid();
    let mut total = 0.0;
    for i in 0..paths.n_common() {
        for k in 0..grid.steps {
            let (m, m2) = paths.moments(i, k);
            let [d0, d1, d2] = f(k, m, m2);
            let s = paths.power_sums(i, k);
            let v = d0 * d0 * s[0]
                + 2.0 * d0 * d1 * s[1]
                + (d1 * d1 + 2.0 * d0 * d2) * s[2]
                + 2.0 * d1 * d2 * s[3]
                + d2 * d2 * s[4];
            total += v.max(0.0);
        }
    }
    total * grid.dt() / paths.n_samples() as f64
}

/// Fitted `u(x, m̄, m₂) ≈ Y` at an interval's left end.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecouplingField {
    pub interface_time: f64,
    pub node: usize,
    pub basis: RegressionBasis,
    pub coeffs: Vec<f64>,
    pub r2: f64,
    pub residual_rms: f64,
    /// Largest `|∂u/∂x|` over the fitted samples.
    pub l_x: f64,
    /// Largest `W₂`-Lipschitz bound of `u` in the measure over the samples.
    pub l_m: f64,
}

impl DecouplingField {
    fn from_solution(sol: &FbsdeSolution, node: usize) -> Self {
        let basis = sol.control.basis().clone();
        let coeffs: Vec<f64> = sol.control.row(0).iter().map(|c| -c).collect();
        let (mut l_x, mut l_m) = (0.0f64, 0.0f64);
        for i in 0..sol.paths.n_common() {
            let (m, m2) = sol.paths.moments(i, 0);
            for &x in sol.paths.cloud(i, 0) {
                l_x = l_x.max(basis.dx(&coeffs, x, m).abs());
                l_m = l_m.max(basis.dm_bound(&coeffs, x, m2));
            }
        }
        let LinearFit {
            r2, residual_rms, ..
        } = sol.start_fit;
        Self {
            interface_time: sol.control.grid().t0,
            node,
            basis,
            coeffs,
            r2,
            residual_rms,
            l_x,
            l_m,
        }
    }

    pub fn eval(&self, x: f64, mean: f64, m2: f64) -> f64 {
        self.basis.dot(&self.coeffs, x, mean, m2)
    }
}

/// Terminal condition of an interval.
#[derive(Debug, Clone)]
pub enum IntervalTerminal {
    /// `g_x(x, m_τ)` with the reference cloud's own law.
    Cost,
    Field(DecouplingField),
}

/// Result of `Φ`: the best response and the reference ensemble it answers.
#[derive(Debug, Clone)]
pub struct PhiOutput {
    pub best_response: FbsdeSolution,
    pub reference: PathEnsemble,
}

/// `Φ(α̂)` on the window's interval: propagate the reference ensemble under
/// `α̂`, freeze its terminal data, and solve the control problem against it.
/// The inner solve starts from `warm` (default `α̂`).
#[allow(clippy::too_many_arguments)]
pub fn phi_map(
    reference: &ControlField,
    init: &[f64],
    noise: &NoiseWindow<'_>,
    cost: &TerminalCost,
    terminal: &IntervalTerminal,
    vol: Volatility,
    basis: &RegressionBasis,
    inner: &InnerConfig,
    warm: Option<&ControlField>,
) -> Result<PhiOutput> {
    let ref_paths = propagate(reference, init, noise, vol.sigma, vol.sigma_tilde)?;
    let warm = warm.unwrap_or(reference);
    let last = ref_paths.grid().steps;
    let best_response = match terminal {
        IntervalTerminal::Cost => {
            let measures = conditional_flow(&ref_paths).terminal_measures();
            let frozen = FrozenTerminal::Cost {
                cost,
                measures: &measures,
            };
            solve_inner(&frozen, init, noise, vol, basis, inner, Some(warm))?
        }
        IntervalTerminal::Field(field) => {
            let moments: Vec<(f64, f64)> = (0..ref_paths.n_common())
                .map(|i| ref_paths.moments(i, last))
                .collect();
            let frozen = FrozenTerminal::Field {
                basis: &field.basis,
                coeffs: &field.coeffs,
                moments: &moments,
            };
            solve_inner(&frozen, init, noise, vol, basis, inner, Some(warm))?
        }
    };
    if !best_response.converged {
        let grid = noise.grid();
        return Err(MfgError::InnerNotConverged {
            start: grid.t0,
            end: grid.t1,
            residual: best_response.residual,
        });
    }
    Ok(PhiOutput {
        best_response,
        reference: ref_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Single,
    Backward,
    Forward,
}

/// Per-interval Picard history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionRecord {
    pub phase: Phase,
    pub start_node: usize,
    pub end_node: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub iterations: usize,
    /// Relative distance `‖Φ(αᵏ) − αᵏ‖ / ‖Φ(αᵏ)‖` per iteration.
    pub residuals: Vec<f64>,
    /// Successive residual ratios; equal to the ratios of successive
    /// control updates because the damping is constant.
    pub ratios: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    pub converged: bool,
    pub split_reason: Option<String>,
}

impl ContractionRecord {
    pub fn mean_ratio(&self) -> Option<f64> {
        if self.ratios.is_empty() {
            None
        } else {
            Some(self.ratios.iter().sum::<f64>() / self.ratios.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntervalSolution {
    pub control: ControlField,
    pub paths: PathEnsemble,
    /// Decoupling field at the interval's left end.
    pub field: DecouplingField,
    pub record: ContractionRecord,
}

#[derive(Debug, Clone)]
pub enum IntervalOutcome {
    Converged(Box<IntervalSolution>),
    Split(ContractionRecord),
}

/// Damped Picard iteration `αᵏ⁺¹ = (1−λ)αᵏ + λΦ(αᵏ)` on one interval.
///
/// `node_offset` is the global index of the window's first node and is only
/// used for labelling.
#[allow(clippy::too_many_arguments)]
pub fn solve_interval(
    noise: &NoiseWindow<'_>,
    init: &[f64],
    cost: &TerminalCost,
    terminal: &IntervalTerminal,
    vol: Volatility,
    basis: &RegressionBasis,
    config: &SolverConfig,
    start: &ControlField,
    phase: Phase,
) -> Result<IntervalOutcome> {
    config.validate()?;
    let grid = noise.grid();
    let mut record = ContractionRecord {
        phase,
        start_node: noise.offset(),
        end_node: noise.offset() + noise.steps(),
        start_time: grid.t0,
        end_time: grid.t1,
        iterations: 0,
        residuals: Vec::new(),
        ratios: Vec::new(),
        inner_iterations: Vec::new(),
        converged: false,
        split_reason: None,
    };
    let mut alpha = start.in_basis(basis)?;
    let mut warm: Option<ControlField> = None;
    let mut streak = 0;
    for iteration in 1..=config.max_iter {
        record.iterations = iteration;
        let out = match phi_map(
            &alpha,
            init,
            noise,
            cost,
            terminal,
            vol,
            basis,
            &config.inner,
            warm.as_ref(),
        ) {
            Ok(out) => out,
            Err(e @ (MfgError::InnerNotConverged { .. } | MfgError::NonFiniteState { .. })) => {
                record.split_reason = Some(e.to_string());
                return Ok(IntervalOutcome::Split(record));
            }
            Err(e) => return Err(e),
        };
        let br = out.best_response;
        record.inner_iterations.push(br.iterations);
        let residual = h2_relative(&br.control, &alpha, &out.reference)?;
        if let Some(&prev) = record.residuals.last() {
            if prev > 0.0 {
                let ratio = residual / prev;
                record.ratios.push(ratio);
                if ratio >= config.split_ratio {
                    streak += 1;
                } else {
                    streak = 0;
                }
            }
        }
        record.residuals.push(residual);
        if residual <= config.tol {
            record.converged = true;
            let field = DecouplingField::from_solution(&br, noise.offset());
            return Ok(IntervalOutcome::Converged(Box::new(IntervalSolution {
                control: br.control,
                paths: br.paths,
                field,
                record,
            })));
        }
        if streak >= config.split_patience {
            record.split_reason = Some(format!(
                "ratio >= {} for {} consecutive iterations",
                config.split_ratio, config.split_patience
            ));
            return Ok(IntervalOutcome::Split(record));
        }
        alpha = alpha.blend(&br.control, config.damping)?;
        warm = Some(br.control);
    }
    record.split_reason = Some(format!(
        "no convergence within {} iterations",
        config.max_iter
    ));
    Ok(IntervalOutcome::Split(record))
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    /// Concatenated feedback over the full grid.
    pub control: ControlField,
    /// States under `control`; its scenario clouds are the measure flow.
    pub paths: PathEnsemble,
    /// Decoupling fields at the left end of every final interval.
    pub interfaces: Vec<DecouplingField>,
    /// Every interval attempt, in execution order.
    pub records: Vec<ContractionRecord>,
    /// `(start_node, end_node)` of the final intervals.
    pub intervals: Vec<(usize, usize)>,
}

impl MfgSolution {
    /// Decoupling field at time 0, i.e. the fitted initial feedback `Y₀`.
    pub fn initial_field(&self) -> &DecouplingField {
        &self.interfaces[0]
    }
}

/// Solve the MFG on `[0, T]` by backward continuation with interval halving,
/// followed by a forward sweep when more than one interval is needed.
pub fn solve_mfg(
    model: &MfgModel,
    disc: &Discretization,
    config: &SolverConfig,
    ensemble: &Ensemble,
) -> Result<MfgSolution> {
    model.validate()?;
    disc.validate()?;
    config.validate()?;
    let grid = ensemble.grid();
    if !grid.same_as(&disc.grid(model.horizon)?) {
        return Err(MfgError::ShapeMismatch(
            "ensemble grid does not match the discretization".into(),
        ));
    }
    let basis = &disc.basis;
    let vol = model.vol;
    let start = ControlField::constant(grid, config.start).in_basis(basis)?;
    let provisional = propagate(
        &start,
        &ensemble.init,
        &ensemble.noise.full(),
        vol.sigma,
        vol.sigma_tilde,
    )?;

    let mut records = Vec::new();
    // (start, end, terminal used, solution), right to left
    let mut pieces: Vec<(usize, usize, IntervalTerminal, IntervalSolution)> = Vec::new();
    let mut terminal = IntervalTerminal::Cost;
    let mut end = grid.steps;
    let mut len = grid.steps;
    while end > 0 {
        let s = end.saturating_sub(len);
        let init = if s == 0 {
            ensemble.init.clone()
        } else {
            provisional.states_at(s)
        };
        let window = ensemble.noise.window(s, end)?;
        let phase = if s == 0 && end == grid.steps {
            Phase::Single
        } else {
            Phase::Backward
        };
        match solve_interval(
            &window,
            &init,
            &model.cost,
            &terminal,
            vol,
            basis,
            config,
            &start.restrict(s, end)?,
            phase,
        )? {
            IntervalOutcome::Converged(sol) => {
                records.push(sol.record.clone());
                let next = IntervalTerminal::Field(sol.field.clone());
                pieces.push((s, end, std::mem::replace(&mut terminal, next), *sol));
                end = s;
            }
            IntervalOutcome::Split(record) => {
                records.push(record);
                if len <= 1 {
                    let (l_x, l_m) = match &terminal {
                        IntervalTerminal::Field(f) => (f.l_x, f.l_m),
                        IntervalTerminal::Cost => (f64::NAN, f64::NAN),
                    };
                    return Err(MfgError::IntervalUnderflow {
                        interface: grid.time(end),
                        l_x,
                        l_m,
                    });
                }
                len /= 2;
            }
        }
    }
    pieces.reverse();

    if pieces.len() == 1 {
        let (s, e, _, sol) = pieces.pop().expect("one piece");
        return Ok(MfgSolution {
            control: sol.control,
            paths: sol.paths,
            interfaces: vec![sol.field],
            records,
            intervals: vec![(s, e)],
        });
    }

    let mut init = ensemble.init.clone();
    let mut controls = Vec::with_capacity(pieces.len());
    let mut interfaces = Vec::with_capacity(pieces.len());
    let mut intervals = Vec::with_capacity(pieces.len());
    for (s, e, terminal, backward) in &pieces {
        let window = ensemble.noise.window(*s, *e)?;
        match solve_interval(
            &window,
            &init,
            &model.cost,
            terminal,
            vol,
            basis,
            config,
            &backward.control,
            Phase::Forward,
        )? {
            IntervalOutcome::Converged(sol) => {
                init = sol.paths.states_at(e - s);
                records.push(sol.record.clone());
                controls.push(sol.control);
                interfaces.push(sol.field);
                intervals.push((*s, *e));
            }
            IntervalOutcome::Split(record) => {
                let residual = record.residuals.last().copied().unwrap_or(f64::NAN);
                return Err(MfgError::InnerNotConverged {
                    start: record.start_time,
                    end: record.end_time,
                    residual,
                });
            }
        }
    }
    let control = ControlField::concat(&controls)?;
    let paths = propagate(
        &control,
        &ensemble.init,
        &ensemble.noise.full(),
        vol.sigma,
        vol.sigma_tilde,
    )?;
    Ok(MfgSolution {
        control,
        paths,
        interfaces,
        records,
        intervals,
    })
}

/// Relative H² distance between `α̂` and `Φ(α̂)` on the full horizon with the
/// cost as terminal condition.
pub fn fixed_point_residual(
    solution: &MfgSolution,
    model: &MfgModel,
    ensemble: &Ensemble,
    inner: &InnerConfig,
) -> Result<f64> {
    let out = phi_map(
        &solution.control,
        &ensemble.init,
        &ensemble.noise.full(),
        &model.cost,
        &IntervalTerminal::Cost,
        model.vol,
        solution.control.basis(),
        inner,
        None,
    )?;
    h2_relative(
        &out.best_response.control,
        &solution.control,
        &out.reference,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub starts: Vec<f64>,
    /// Largest pairwise H² distance, along the first solution's paths.
    pub max_distance: f64,
    /// `max_distance` relative to the first solution's H² norm.
    pub max_relative: f64,
    pub all_converged: bool,
}

/// Solve from each constant initial guess on the same ensemble and compare.
pub fn uniqueness_probe(
    model: &MfgModel,
    disc: &Discretization,
    config: &SolverConfig,
    ensemble: &Ensemble,
    starts: &[f64],
) -> Result<UniquenessReport> {
    if starts.len() < 2 {
        return Err(invalid("starts", "need at least two initial guesses"));
    }
    let mut controls = Vec::with_capacity(starts.len());
    let mut reference_paths = None;
    let mut all_converged = true;
    for &s in starts {
        let cfg = SolverConfig {
            start: s,
            ..config.clone()
        };
        match solve_mfg(model, disc, &cfg, ensemble) {
            Ok(sol) => {
                if reference_paths.is_none() {
                    reference_paths = Some(sol.paths.clone());
                }
                controls.push(sol.control);
            }
            Err(MfgError::InnerNotConverged { .. } | MfgError::IntervalUnderflow { .. }) => {
                all_converged = false
            }
            Err(e) => return Err(e),
        }
    }
    let paths = match reference_paths {
        Some(p) if controls.len() >= 2 => p,
        _ => {
            return Ok(UniquenessReport {
                starts: starts.to_vec(),
                max_distance: f64::NAN,
                max_relative: f64::NAN,
                all_converged: false,
            })
        }
    };
    let mut max_distance = 0.0f64;
    for i in 0..controls.len() {
        for j in i + 1..controls.len() {
            max_distance = max_distance.max(h2_distance(&controls[i], &controls[j], &paths)?);
        }
    }
    let norm = h2_norm(&controls[0], &paths)?;
    Ok(UniquenessReport {
        starts: starts.to_vec(),
        max_distance,
        max_relative: if norm > 1e-8 {
            max_distance / norm
        } else {
            max_distance
        },
        all_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditional::Feature;

    fn lq_model(q: f64, q_bar: f64, s: f64, sigma: f64, sigma_tilde: f64) -> MfgModel {
        MfgModel {
            cost: TerminalCost::track_mean(q, q_bar, s).unwrap(),
            vol: Volatility::new(sigma, sigma_tilde).unwrap(),
            horizon: 1.0,
            initial: InitialDistribution::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
        }
    }

    fn small_disc(steps: usize) -> Discretization {
        Discretization {
            steps,
            n_common: 16,
            n_particles: 200,
            basis: RegressionBasis::affine(),
        }
    }

    #[test]
    fn h2_examples() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = sample_noise(3, 4, g, 1).unwrap();
        let paths = propagate(
            &ControlField::constant(g, 0.0),
            &[0.5; 12],
            &noise.full(),
            1.0,
            1.0,
        )
        .unwrap();
        let one = ControlField::constant(g, 1.0);
        let zero = ControlField::constant(g, 0.0);
        assert_eq!(h2_distance(&one, &one, &paths).unwrap(), 0.0);
        assert!((h2_distance(&one, &zero, &paths).unwrap() - 1.0).abs() < 1e-12);
        // Δ only in the x coefficient: |Δc| sqrt(Σ_k E[X_k²] dt)
        let basis = RegressionBasis::new(vec![Feature::Const, Feature::X], 0.0).unwrap();
        let mut coeffs = vec![0.0; 22];
        for k in 0..11 {
            coeffs[2 * k + 1] = 0.3;
        }
        let lin = ControlField::from_rows(g, basis, coeffs).unwrap();
        let ex2: f64 = (0..10)
            .map(|k| paths.states_at(k).iter().map(|x| x * x).sum::<f64>() / 12.0)
            .sum::<f64>()
            * 0.1;
        assert!((h2_distance(&lin, &zero, &paths).unwrap() - 0.3 * ex2.sqrt()).abs() < 1e-12);
        let other = TimeGrid::new(0.0, 1.0, 5).unwrap();
        assert!(h2_distance(&ControlField::constant(other, 0.0), &zero, &paths).is_err());
    }

    #[test]
    fn zero_cost_is_a_one_step_fixed_point() {
        let model = MfgModel {
            cost: TerminalCost::zero(),
            ..lq_model(1.0, 1.0, 1.0, 0.5, 0.5)
        };
        let disc = small_disc(20);
        let ens = Ensemble::sample(&model, &disc, 3).unwrap();
        let sol = solve_mfg(&model, &disc, &SolverConfig::default(), &ens).unwrap();
        assert_eq!(sol.records.len(), 1);
        assert_eq!(sol.records[0].iterations, 1);
        assert!(sol.records[0].ratios.is_empty());
        assert!(sol.control.coeffs().iter().all(|&c| c == 0.0));
        let probe =
            uniqueness_probe(&model, &disc, &SolverConfig::default(), &ens, &[0.0, 1.0]).unwrap();
        assert_eq!(probe.max_distance, 0.0);
    }

    #[test]
    fn measure_free_terminal_makes_phi_constant() {
        // σ = σ̃ = 0, ξ₀ = 1, v(x) = x: Φ(anything) ≡ -0.5
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let noise = sample_noise(1, 4, g, 0).unwrap();
        let cost = TerminalCost::state_only(0.5).unwrap();
        let vol = Volatility::new(0.0, 0.0).unwrap();
        let inner = InnerConfig {
            tol: 1e-9,
            ..InnerConfig::default()
        };
        for guess in [0.0, 2.0, -3.0] {
            let out = phi_map(
                &ControlField::constant(g, guess),
                &[1.0; 4],
                &noise.full(),
                &cost,
                &IntervalTerminal::Cost,
                vol,
                &RegressionBasis::affine(),
                &inner,
                None,
            )
            .unwrap();
            let br = &out.best_response;
            for k in [0, 50, 99] {
                let (m, m2) = br.paths.moments(0, k);
                let a = br.control.eval(k, br.paths.state(0, 0, k), m, m2);
                assert!((a + 0.5).abs() < 1e-3, "guess {guess}, node {k}: {a}");
            }
        }
    }

    #[test]
    fn phi_matches_hand_affine_recursion() {
        // TrackMean(0,1,1), α̂ ≡ 0, σ = 0, two steps of 0.5: v(x) = 2(x − m̄ref_T).
        // Own cloud = reference cloud + deterministic drift, so the
        // fixed point is Y_k = a_k (X_k − m̄_k) + 0 with 1/a_k = 1/a_{k+1} + dt.
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let noise = sample_noise(6, 50, g, 4).unwrap();
        let init = sample_initial(
            &InitialDistribution::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
            6,
            50,
            4,
        )
        .unwrap();
        let cost = TerminalCost::track_mean(0.0, 1.0, 1.0).unwrap();
        let out = phi_map(
            &ControlField::constant(g, 0.0),
            &init,
            &noise.full(),
            &cost,
            &IntervalTerminal::Cost,
            Volatility::new(0.0, 1.0).unwrap(),
            &RegressionBasis::affine(),
            &InnerConfig {
                tol: 1e-10,
                ..InnerConfig::default()
            },
            None,
        )
        .unwrap();
        let a1 = 1.0 / (0.5 + 0.5);
        let a0 = 1.0 / (1.0 / a1 + 0.5);
        for (k, a) in [(0usize, a0), (1, a1)] {
            let row = out.best_response.control.row(k);
            assert!(row[0].abs() < 1e-6, "{row:?}");
            assert!((row[1] + a).abs() < 1e-6, "node {k}: {row:?}");
            assert!((row[2] - a).abs() < 1e-6, "node {k}: {row:?}");
        }
    }

    #[test]
    fn split_when_contraction_fails() {
        // mean attraction with a long horizon: the full interval does not
        // contract, continuation splits and the forward sweep concatenates
        let model = MfgModel {
            horizon: 2.0,
            ..lq_model(0.0, 1.0, 1.0, 0.5, 1.0)
        };
        let disc = small_disc(40);
        let ens = Ensemble::sample(&model, &disc, 8).unwrap();
        let config = SolverConfig::default();
        let sol = solve_mfg(&model, &disc, &config, &ens).unwrap();
        assert!(sol.intervals.len() > 1, "{:?}", sol.intervals);
        assert!(sol.records.iter().any(|r| r.split_reason.is_some()));
        assert_eq!(sol.intervals.first().unwrap().0, 0);
        assert_eq!(sol.intervals.last().unwrap().1, 40);
        assert_eq!(sol.control.grid().steps, 40);
        // run-wide Lipschitz bound on the interfaces
        let bound = sol
            .interfaces
            .iter()
            .map(|f| f.l_x.max(f.l_m))
            .fold(0.0, f64::max);
        assert!(bound.is_finite() && bound < 10.0, "{bound}");
        // interface consistency: the field at each interior interface
        // reproduces the control of the interval to its right at that node
        for w in sol.intervals.windows(2) {
            let (node, _) = w[1];
            let field = sol.interfaces.iter().find(|f| f.node == node).unwrap();
            let mut worst = 0.0f64;
            for i in 0..disc.n_common {
                let (m, m2) = sol.paths.moments(i, node);
                for &x in sol.paths.cloud(i, node) {
                    let u = field.eval(x, m, m2);
                    worst = worst.max((u + sol.control.eval(node, x, m, m2)).abs());
                }
            }
            assert!(worst <= 10.0 * field.residual_rms + 1e-6, "{worst}");
        }
        let residual = fixed_point_residual(&sol, &model, &ens, &config.inner).unwrap();
        let summed: f64 = sol.intervals.len() as f64 * config.tol;
        assert!(residual <= 2.0 * summed + 1e-3, "{residual}");
    }

    #[test]
    fn contraction_ratio_is_below_one_on_short_intervals() {
        let model = lq_model(1.0, 1.0, 1.0, 0.5, 0.5);
        let disc = small_disc(10);
        let model = MfgModel {
            horizon: 0.1,
            ..model
        };
        let ens = Ensemble::sample(&model, &disc, 1).unwrap();
        let sol = solve_mfg(&model, &disc, &SolverConfig::default(), &ens).unwrap();
        let rec = &sol.records[0];
        assert!(rec.converged);
        assert!(rec.mean_ratio().unwrap() < 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig {
            damping: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            split_patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(small_disc(0).validate().is_err());
        let mut m = lq_model(1.0, 1.0, 1.0, 0.5, 0.5);
        m.horizon = -1.0;
        assert!(m.validate().is_err());
    }
}
