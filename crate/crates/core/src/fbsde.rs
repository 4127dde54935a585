//! Picard solver for the forward–backward system with a frozen terminal law.
//!
//! Forward: `dX = α dt + σ dW + σ̃ dW̃` under the current feedback. Backward:
//! `Y` is a martingale with `Y_T` given by the frozen terminal data, and the
//! next control is `α = −Y`. The control is represented on a regression
//! basis, so each sweep is a propagation followed by one regression per node.

use serde::{Deserialize, Serialize};

use crate::conditional::{
    fit_conditional, fit_martingale_step, fitted_values, terminal_adjoint, IncrementTerms,
    LinearFit, RegressionBasis,
};
use crate::costs::TerminalCost;
use crate::error::{invalid, MfgError, Result};
use crate::measures::EmpiricalMeasure;
use crate::mfg::{h2_distance, h2_norm};
use crate::paths::{propagate, ControlField, NoiseWindow, PathEnsemble};

/// Diffusion coefficients of the state equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volatility {
    pub sigma: f64,
    pub sigma_tilde: f64,
}

impl Volatility {
    pub fn new(sigma: f64, sigma_tilde: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(invalid("sigma", "must be finite and >= 0"));
        }
        if !(sigma_tilde.is_finite() && sigma_tilde >= 0.0) {
            return Err(invalid("sigma_tilde", "must be finite and >= 0"));
        }
        Ok(Self { sigma, sigma_tilde })
    }
}

/// How `Y_k = E[Y_T | F_k]` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardScheme {
    /// Regress the fitted `Y_{k+1}` on node-`k` features plus the one-step
    /// Brownian increments. Exact for affine adjoints; the increments soak
    /// up the martingale noise, which otherwise swamps the measure
    /// coefficient when the cloud means barely differ across scenarios.
    #[default]
    Stepwise,
    /// Regress `Y_T` directly on node-`k` features at every node.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub damping: f64,
    /// Relative H² tolerance between successive controls.
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: BackwardScheme,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-4,
            max_iter: 200,
            scheme: BackwardScheme::Stepwise,
        }
    }
}

impl InnerConfig {
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
        Ok(())
    }
}

/// Terminal condition of the backward equation, frozen per scenario.
#[derive(Debug, Clone, Copy)]
pub enum FrozenTerminal<'a> {
    /// `Y_T = g_x(X_T, m_i)` with `m_i` the frozen law of scenario `i`.
    Cost {
        cost: &'a TerminalCost,
        measures: &'a [EmpiricalMeasure],
    },
    /// `Y_T = u(X_T, m̄_i, m₂_i)` with a fitted decoupling field and frozen
    /// scenario moments.
    Field {
        basis: &'a RegressionBasis,
        coeffs: &'a [f64],
        moments: &'a [(f64, f64)],
    },
}

impl FrozenTerminal<'_> {
    fn n_common(&self) -> usize {
        match self {
            FrozenTerminal::Cost { measures, .. } => measures.len(),
            FrozenTerminal::Field { moments, .. } => moments.len(),
        }
    }

    /// `Y_T` for every sample of `paths`, laid out `[scenario][particle]`.
    pub fn adjoint(&self, paths: &PathEnsemble) -> Result<Vec<f64>> {
        if self.n_common() != paths.n_common() {
            return Err(MfgError::ShapeMismatch(format!(
                "terminal data for {} scenarios, ensemble has {}",
                self.n_common(),
                paths.n_common()
            )));
        }
        match *self {
            FrozenTerminal::Cost { cost, measures } => terminal_adjoint(cost, paths, measures),
            FrozenTerminal::Field {
                basis,
                coeffs,
                moments,
            } => {
                let last = paths.grid().steps;
                let mut out = Vec::with_capacity(paths.n_samples());
                for (i, &(mean, m2)) in moments.iter().enumerate() {
                    out.extend(
                        paths
                            .cloud(i, last)
                            .iter()
                            .map(|&x| basis.dot(coeffs, x, mean, m2)),
                    );
                }
                Ok(out)
            }
        }
    }
}

/// Output of one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardFit {
    /// `−Y` coefficients per node.
    pub control: ControlField,
    /// Regression diagnostics at the first node (the decoupling-field fit).
    pub start_fit: LinearFit,
}

/// Estimate `Y` at every node from `terminal` values and return `α = −Y`.
pub fn backward_pass(
    terminal: &[f64],
    paths: &PathEnsemble,
    noise: &NoiseWindow<'_>,
    basis: &RegressionBasis,
    scheme: BackwardScheme,
    vol: Volatility,
) -> Result<BackwardFit> {
    let grid = *paths.grid();
    let p = basis.len();
    let steps = grid.steps;
    let mut coeffs = vec![0.0; grid.nodes() * p];
    let last = fit_conditional(terminal, paths, steps, basis)?;
    let negate = |dst: &mut [f64], src: &[f64]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = -s;
        }
    };
    negate(&mut coeffs[steps * p..], &last.coeffs);
    let mut start_fit = last;
    match scheme {
        BackwardScheme::Stepwise => {
            let terms = IncrementTerms::for_volatilities(vol.sigma, vol.sigma_tilde);
            let mut target = terminal.to_vec();
            for k in (0..steps).rev() {
                let fit = fit_martingale_step(&target, paths, k, basis, noise, terms)?;
                negate(&mut coeffs[k * p..(k + 1) * p], &fit.coeffs);
                if k > 0 {
                    target = fitted_values(&fit.coeffs, paths, k, basis);
                }
                start_fit = fit;
            }
        }
        BackwardScheme::Global => {
            for k in (0..steps).rev() {
                let fit = fit_conditional(terminal, paths, k, basis)?;
                negate(&mut coeffs[k * p..(k + 1) * p], &fit.coeffs);
                start_fit = fit;
            }
        }
    }
    Ok(BackwardFit {
        control: ControlField::from_rows(grid, basis.clone(), coeffs)?,
        start_fit,
    })
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    /// `α = −Y` as fitted coefficients.
    pub control: ControlField,
    /// States under `control`.
    pub paths: PathEnsemble,
    /// Relative H² distance of the last Picard update.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Diagnostics of the `Y` regression at the first node.
    pub start_fit: LinearFit,
}

/// Damped Picard iteration on `α ↦ −Y[α]` with frozen terminal data.
///
/// Starts from `warm` when given (projected onto `basis`), otherwise from
/// `α ≡ 0`. The same noise is used in every sweep. Without convergence
/// within `max_iter` the iterate with the smallest residual is returned with
/// `converged = false`.
pub fn solve_inner(
    terminal: &FrozenTerminal<'_>,
    init: &[f64],
    noise: &NoiseWindow<'_>,
    vol: Volatility,
    basis: &RegressionBasis,
    config: &InnerConfig,
    warm: Option<&ControlField>,
) -> Result<FbsdeSolution> {
    config.validate()?;
    basis.validate()?;
    let grid = noise.grid();
    let mut control = match warm {
        Some(w) if w.basis() == basis => w.clone(),
        Some(w) => w.in_basis(basis)?,
        None => ControlField::zero(grid, basis.clone()),
    };
    let mut best: Option<(f64, ControlField, LinearFit)> = None;
    for iteration in 1..=config.max_iter {
        let paths = propagate(&control, init, noise, vol.sigma, vol.sigma_tilde)?;
        let y_t = terminal.adjoint(&paths)?;
        let fit = backward_pass(&y_t, &paths, noise, basis, config.scheme, vol)?;
        let d = h2_distance(&fit.control, &control, &paths)?;
        let scale = h2_norm(&fit.control, &paths)?.max(1e-8);
        let residual = d / scale;
        if residual <= config.tol {
            let paths = if d == 0.0 {
                paths
            } else {
                propagate(&fit.control, init, noise, vol.sigma, vol.sigma_tilde)?
            };
            return Ok(FbsdeSolution {
                control: fit.control,
                paths,
                residual,
                iterations: iteration,
                converged: true,
                start_fit: fit.start_fit,
            });
        }
        if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
            best = Some((residual, fit.control.clone(), fit.start_fit.clone()));
        }
        control = control.blend(&fit.control, config.damping)?;
    }
    let (residual, control, start_fit) = best.expect("max_iter >= 1");
    let paths = propagate(&control, init, noise, vol.sigma, vol.sigma_tilde)?;
    Ok(FbsdeSolution {
        control,
        paths,
        residual,
        iterations: config.max_iter,
        converged: false,
        start_fit,
    })
}

/// One extra Picard sweep from `solution`: relative H² distance between its
/// control and the control re-fitted along its own paths.
pub fn fbsde_residual(
    solution: &FbsdeSolution,
    terminal: &FrozenTerminal<'_>,
    noise: &NoiseWindow<'_>,
    vol: Volatility,
    scheme: BackwardScheme,
) -> Result<f64> {
    let basis = solution.control.basis();
    let y_t = terminal.adjoint(&solution.paths)?;
    let fit = backward_pass(&y_t, &solution.paths, noise, basis, scheme, vol)?;
    let d = h2_distance(&fit.control, &solution.control, &solution.paths)?;
    Ok(d / h2_norm(&fit.control, &solution.paths)?.max(1e-8))
}
