//! Regression estimates of conditional expectations across the ensemble.
//!
//! The adjoint process has zero driver, so `Y_k = E[Y_{k+1} | F_k]`. The
//! conditioning information at node `k` is the particle state together with
//! the moments of its scenario's cloud; a single regression pooled over all
//! scenarios estimates the map `(x, m̄, m₂) ↦ Y_k`.
//!
//! [`fit_martingale_step`] adds the one-step Brownian increments as extra
//! regressors. They are orthogonal to everything `F_k`-measurable, so the
//! feature coefficients stay unbiased while the martingale part of the target
//! (`Z dW + Z̃ dW̃`) is absorbed instead of showing up as noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::TerminalCost;
use crate::error::{invalid, MfgError, Result};
use crate::measures::EmpiricalMeasure;
use crate::paths::{NoiseWindow, PathEnsemble};

/// State features available to regressions and feedback controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    #[serde(rename = "1")]
    Const,
    X,
    X2,
    Mean,
    SecondMoment,
    XMean,
}

impl Feature {
    #[inline]
    pub fn eval(self, x: f64, mean: f64, m2: f64) -> f64 {
        match self {
            Feature::Const => 1.0,
            Feature::X => x,
            Feature::X2 => x * x,
            Feature::Mean => mean,
            Feature::SecondMoment => m2,
            Feature::XMean => x * mean,
        }
    }

    /// `(s, p)` with `φ(x, m̄, m₂) = s · xᵖ` for fixed moments.
    #[inline]
    pub fn parts(self, mean: f64, m2: f64) -> (f64, usize) {
        match self {
            Feature::Const => (1.0, 0),
            Feature::X => (1.0, 1),
            Feature::X2 => (1.0, 2),
            Feature::Mean => (mean, 0),
            Feature::SecondMoment => (m2, 0),
            Feature::XMean => (mean, 1),
        }
    }

    /// `∂/∂x`.
    fn dx(self, x: f64, mean: f64) -> f64 {
        match self {
            Feature::X => 1.0,
            Feature::X2 => 2.0 * x,
            Feature::XMean => mean,
            _ => 0.0,
        }
    }
}

/// Ordered feature list plus a ridge penalty. The penalty is per sample:
/// the normal equations receive `ridge · n · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub features: Vec<Feature>,
    pub ridge: f64,
}

pub const DEFAULT_RIDGE: f64 = 1e-8;

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::affine()
    }
}

impl RegressionBasis {
    pub fn new(features: Vec<Feature>, ridge: f64) -> Result<Self> {
        let basis = Self { features, ridge };
        basis.validate()?;
        Ok(basis)
    }

    /// `{1, x, m̄}`.
    pub fn affine() -> Self {
        Self {
            features: vec![Feature::Const, Feature::X, Feature::Mean],
            ridge: DEFAULT_RIDGE,
        }
    }

    /// `{1, x, x², m̄, m₂, x·m̄}`.
    pub fn extended() -> Self {
        Self {
            features: vec![
                Feature::Const,
                Feature::X,
                Feature::X2,
                Feature::Mean,
                Feature::SecondMoment,
                Feature::XMean,
            ],
            ridge: DEFAULT_RIDGE,
        }
    }

    /// `{1}`; used for constant controls.
    pub fn constant() -> Self {
        Self {
            features: vec![Feature::Const],
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(invalid("basis", "feature list must be non-empty"));
        }
        for (i, f) in self.features.iter().enumerate() {
            if self.features[..i].contains(f) {
                return Err(invalid("basis", format!("duplicate feature {f:?}")));
            }
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(invalid("ridge", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    #[inline]
    pub fn eval_into(&self, x: f64, mean: f64, m2: f64, out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.features) {
            *o = f.eval(x, mean, m2);
        }
    }

    #[inline]
    pub fn dot(&self, coeffs: &[f64], x: f64, mean: f64, m2: f64) -> f64 {
        self.features
            .iter()
            .zip(coeffs)
            .map(|(f, c)| c * f.eval(x, mean, m2))
            .sum()
    }

    /// `Σ c_j φ_j` as a quadratic `[c₀, c₁, c₂]` in `x` for fixed moments.
    #[inline]
    pub fn collapse(&self, coeffs: &[f64], mean: f64, m2: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (f, c) in self.features.iter().zip(coeffs) {
            let (s, p) = f.parts(mean, m2);
            out[p] += c * s;
        }
        out
    }

    /// `∂/∂x` of `Σ c_j φ_j`.
    pub fn dx(&self, coeffs: &[f64], x: f64, mean: f64) -> f64 {
        self.features
            .iter()
            .zip(coeffs)
            .map(|(f, c)| c * f.dx(x, mean))
            .sum()
    }

    /// Local `W₂`-Lipschitz bound of `Σ c_j φ_j` in the measure argument:
    /// `|∂/∂m̄| + |∂/∂m₂| · 2√m₂` (the mean is 1-Lipschitz and
    /// `|m₂ - m₂'| ≤ W₂ (√m₂ + √m₂')`).
    pub fn dm_bound(&self, coeffs: &[f64], x: f64, m2: f64) -> f64 {
        let mut d_mean = 0.0;
        let mut d_m2 = 0.0;
        for (f, c) in self.features.iter().zip(coeffs) {
            match f {
                Feature::Mean => d_mean += c,
                Feature::XMean => d_mean += c * x,
                Feature::SecondMoment => d_m2 += c,
                _ => {}
            }
        }
        d_mean.abs() + d_m2.abs() * 2.0 * m2.max(0.0).sqrt()
    }
}

/// Accumulated normal equations `XᵀX c = Xᵀy`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    sum_y: f64,
    n: usize,
}

impl NormalEquations {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            xtx: vec![0.0; dim * dim],
            xty: vec![0.0; dim],
            yty: 0.0,
            sum_y: 0.0,
            n: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, row: &[f64], y: f64) {
        let d = self.dim;
        for i in 0..d {
            let ri = row[i];
            self.xty[i] += ri * y;
            let base = i * d;
            for (acc, &rj) in self.xtx[base + i..base + d].iter_mut().zip(&row[i..]) {
                *acc += ri * rj;
            }
        }
        self.yty += y * y;
        self.sum_y += y;
        self.n += 1;
    }

    pub fn merge(&mut self, other: &NormalEquations) {
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        self.yty += other.yty;
        self.sum_y += other.sum_y;
        self.n += other.n;
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    /// Solve with penalty `ridge · n` on every coefficient.
    pub fn solve(&self, ridge: f64, node: usize) -> Result<LinearFit> {
        let d = self.dim;
        let lambda = ridge * self.n as f64;
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut max_diag = 0.0f64;
        for i in 0..d {
            for j in i..d {
                let v = self.xtx[i * d + j];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            max_diag = max_diag.max(self.xtx[i * d + i].abs());
            a[(i, i)] += lambda;
        }
        let b = DVector::from_column_slice(&self.xty);
        let chol = a
            .clone()
            .cholesky()
            .ok_or(MfgError::RankDeficient { node, pivot: 0.0 })?;
        let min_pivot = (0..d)
            .map(|i| chol.l_dirty()[(i, i)].powi(2))
            .fold(f64::INFINITY, f64::min);
        if ridge == 0.0 && min_pivot <= 1e-12 * max_diag.max(f64::MIN_POSITIVE) {
            return Err(MfgError::RankDeficient {
                node,
                pivot: min_pivot,
            });
        }
        let c = chol.solve(&b);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::NonFiniteFit { node });
        }
        // residual sum of squares from the normal equations
        let mut cxty = 0.0;
        let mut ctxtxc = 0.0;
        for i in 0..d {
            cxty += c[i] * self.xty[i];
            for j in 0..d {
                let v = if i <= j {
                    self.xtx[i * d + j]
                } else {
                    self.xtx[j * d + i]
                };
                ctxtxc += c[i] * v * c[j];
            }
        }
        let n = self.n.max(1) as f64;
        let sse = (self.yty - 2.0 * cxty + ctxtxc).max(0.0);
        let sst = (self.yty - self.sum_y * self.sum_y / n).max(0.0);
        let r2 = if sst > 1e-300 { 1.0 - sse / sst } else { 1.0 };
        Ok(LinearFit {
            coeffs: c.iter().copied().collect(),
            r2,
            residual_rms: (sse / n).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub coeffs: Vec<f64>,
    pub r2: f64,
    pub residual_rms: f64,
}

/// A regressor column within one scenario: a scenario constant times a
/// power of the state, or the particle's own idiosyncratic increment.
#[derive(Debug, Clone, Copy)]
enum Column {
    Poly { scale: f64, power: usize },
    Increment,
}

/// Per-scenario sums from which the normal equations are assembled.
#[derive(Debug, Default)]
struct ScenarioSums {
    n: f64,
    /// `Σ xᵖ`, `p = 0..=4`.
    x: [f64; 5],
    /// `Σ xᵖ y`, `p = 0..=2`.
    xy: [f64; 3],
    yy: f64,
    /// `Σ xᵖ ΔW`, `p = 0..=2`.
    xdw: [f64; 3],
    dwdw: f64,
    dwy: f64,
}

impl ScenarioSums {
    fn product(&self, a: Column, b: Column) -> f64 {
        match (a, b) {
            (Column::Poly { scale: s, power: p }, Column::Poly { scale: t, power: q }) => {
                s * t * self.x[p + q]
            }
            (Column::Poly { scale, power }, Column::Increment)
            | (Column::Increment, Column::Poly { scale, power }) => scale * self.xdw[power],
            (Column::Increment, Column::Increment) => self.dwdw,
        }
    }

    fn with_target(&self, a: Column) -> f64 {
        match a {
            Column::Poly { scale, power } => scale * self.xy[power],
            Column::Increment => self.dwy,
        }
    }

    fn add_to(&self, cols: &[Column], ne: &mut NormalEquations) {
        let d = ne.dim;
        for (i, &a) in cols.iter().enumerate() {
            ne.xty[i] += self.with_target(a);
            for (j, &b) in cols.iter().enumerate().skip(i) {
                ne.xtx[i * d + j] += self.product(a, b);
            }
        }
        ne.yty += self.yy;
        ne.sum_y += self.xy[0];
        ne.n += self.n as usize;
    }
}

/// Assemble normal equations scenario by scenario. Scenarios are reduced in
/// index order, so the result does not depend on the worker count.
fn assemble<F>(n_common: usize, dim: usize, per_scenario: F) -> NormalEquations
where
    F: Fn(usize, &mut NormalEquations) + Sync,
{
    let parts: Vec<NormalEquations> = (0..n_common)
        .into_par_iter()
        .map(|i| {
            let mut ne = NormalEquations::new(dim);
            per_scenario(i, &mut ne);
            ne
        })
        .collect();
    let mut total = NormalEquations::new(dim);
    for p in &parts {
        total.merge(p);
    }
    total
}

fn basis_columns(basis: &RegressionBasis, mean: f64, m2: f64, out: &mut Vec<Column>) {
    out.clear();
    out.extend(basis.features.iter().map(|f| {
        let (scale, power) = f.parts(mean, m2);
        Column::Poly { scale, power }
    }));
}

fn check_targets(targets: &[f64], paths: &PathEnsemble, dim: usize) -> Result<()> {
    let n = paths.n_common() * paths.n_particles();
    if targets.len() != n {
        return Err(MfgError::ShapeMismatch(format!(
            "{} targets for {n} samples",
            targets.len()
        )));
    }
    if n < dim {
        return Err(invalid(
            "samples",
            format!("{n} samples for {dim} features"),
        ));
    }
    Ok(())
}

/// Least-squares projection of `targets` (laid out `[scenario][particle]`)
/// onto `basis` evaluated at node `node` of `paths`.
pub fn fit_conditional(
    targets: &[f64],
    paths: &PathEnsemble,
    node: usize,
    basis: &RegressionBasis,
) -> Result<LinearFit> {
    let p = basis.len();
    check_targets(targets, paths, p)?;
    let np = paths.n_particles();
    let ne = assemble(paths.n_common(), p, |i, ne| {
        let (mean, m2) = paths.moments(i, node);
        let mut sums = ScenarioSums {
            n: np as f64,
            x: *paths.power_sums(i, node),
            ..Default::default()
        };
        for (&x, &y) in paths
            .cloud(i, node)
            .iter()
            .zip(&targets[i * np..(i + 1) * np])
        {
            let xy = x * y;
            sums.xy[0] += y;
            sums.xy[1] += xy;
            sums.xy[2] += xy * x;
            sums.yy += y * y;
        }
        let mut cols = Vec::with_capacity(p);
        basis_columns(basis, mean, m2, &mut cols);
        sums.add_to(&cols, ne);
    });
    ne.solve(basis.ridge, node)
}

/// Which one-step increments enter [`fit_martingale_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IncrementTerms {
    pub idiosyncratic: bool,
    pub common: bool,
    /// Scenario average of the idiosyncratic increments; it drives the
    /// finite-cloud mean and vanishes as the cloud grows.
    pub cloud_mean: bool,
}

impl IncrementTerms {
    pub fn for_volatilities(sigma: f64, sigma_tilde: f64) -> Self {
        Self {
            idiosyncratic: sigma != 0.0,
            common: sigma_tilde != 0.0,
            cloud_mean: sigma != 0.0,
        }
    }

    fn count(&self) -> usize {
        self.idiosyncratic as usize + self.common as usize + self.cloud_mean as usize
    }
}

/// Regress `targets` (values at node `node + 1`) on the basis at `node`
/// together with the Brownian increments over `[t_node, t_node+1]`.
/// Returns the fit restricted to the basis coefficients; `r2` and
/// `residual_rms` describe the full regression.
pub fn fit_martingale_step(
    targets: &[f64],
    paths: &PathEnsemble,
    node: usize,
    basis: &RegressionBasis,
    noise: &NoiseWindow<'_>,
    terms: IncrementTerms,
) -> Result<LinearFit> {
    let p = basis.len();
    let dim = p + terms.count();
    check_targets(targets, paths, dim)?;
    let np = paths.n_particles();
    let ne = assemble(paths.n_common(), dim, |i, ne| {
        let (mean, m2) = paths.moments(i, node);
        let mut sums = ScenarioSums {
            n: np as f64,
            x: *paths.power_sums(i, node),
            ..Default::default()
        };
        let xs = paths.cloud(i, node);
        let ys = &targets[i * np..(i + 1) * np];
        if terms.idiosyncratic {
            for ((&x, &y), &dw) in xs.iter().zip(ys).zip(noise.idiosyncratic(i, node)) {
                let xy = x * y;
                sums.xy[0] += y;
                sums.xy[1] += xy;
                sums.xy[2] += xy * x;
                sums.yy += y * y;
                let xdw = x * dw;
                sums.xdw[0] += dw;
                sums.xdw[1] += xdw;
                sums.xdw[2] += xdw * x;
                sums.dwdw += dw * dw;
                sums.dwy += dw * y;
            }
        } else {
            for (&x, &y) in xs.iter().zip(ys) {
                let xy = x * y;
                sums.xy[0] += y;
                sums.xy[1] += xy;
                sums.xy[2] += xy * x;
                sums.yy += y * y;
            }
        }
        let mut cols = Vec::with_capacity(dim);
        basis_columns(basis, mean, m2, &mut cols);
        if terms.idiosyncratic {
            cols.push(Column::Increment);
        }
        if terms.common {
            cols.push(Column::Poly {
                scale: noise.common(i, node),
                power: 0,
            });
        }
        if terms.cloud_mean {
            cols.push(Column::Poly {
                scale: noise.cloud_mean(i, node),
                power: 0,
            });
        }
        sums.add_to(&cols, ne);
    });
    let mut fit = ne.solve(basis.ridge, node)?;
    fit.coeffs.truncate(p);
    Ok(fit)
}

/// Fitted values `Σ c_j φ_j` at node `node` for every sample.
pub fn fitted_values(
    coeffs: &[f64],
    paths: &PathEnsemble,
    node: usize,
    basis: &RegressionBasis,
) -> Vec<f64> {
    let np = paths.n_particles();
    let mut out = vec![0.0; paths.n_common() * np];
    out.par_chunks_mut(np).enumerate().for_each(|(i, chunk)| {
        let (mean, m2) = paths.moments(i, node);
        let [c0, c1, c2] = basis.collapse(coeffs, mean, m2);
        for (o, &x) in chunk.iter_mut().zip(paths.cloud(i, node)) {
            *o = c0 + (c1 + c2 * x) * x;
        }
    });
    out
}

/// `Y_T = g_x(X_T, m_T)` with `m_T` the scenario's terminal measure.
pub fn terminal_adjoint(
    cost: &TerminalCost,
    paths: &PathEnsemble,
    terminal_measures: &[EmpiricalMeasure],
) -> Result<Vec<f64>> {
    if terminal_measures.len() != paths.n_common() {
        return Err(MfgError::ShapeMismatch(format!(
            "{} terminal measures for {} scenarios",
            terminal_measures.len(),
            paths.n_common()
        )));
    }
    let np = paths.n_particles();
    let last = paths.grid().steps;
    let mut out = vec![0.0; paths.n_common() * np];
    out.par_chunks_mut(np).enumerate().for_each(|(i, chunk)| {
        let frozen = cost.freeze(&terminal_measures[i]);
        for (o, &x) in chunk.iter_mut().zip(paths.cloud(i, last)) {
            *o = frozen.g_x(x);
        }
    });
    Ok(out)
}
