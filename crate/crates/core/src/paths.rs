//! Time grids, seeded Brownian ensembles and forward state propagation.
//!
//! Arrays are stored scenario-major: `[scenario][node][particle]` for states
//! and idiosyncratic increments, `[scenario][node]` for the common
//! increments and cloud moments. Each scenario is one common-noise path; its
//! particle cloud is the empirical conditional law.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::RegressionBasis;
use crate::error::{invalid, MfgError, Result};
use crate::measures::EmpiricalMeasure;
use crate::rng::{keyed, DOMAIN_INITIAL, DOMAIN_NOISE};

/// Uniform grid `t0 + k·dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
            return Err(invalid("grid", format!("need t0 < t1, got [{t0}, {t1}]")));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        self.t0 + node as f64 * self.dt()
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Sub-grid spanning nodes `start..=end`.
    pub fn sub(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.steps {
            return Err(invalid(
                "interval",
                format!("nodes {start}..={end} outside 0..={}", self.steps),
            ));
        }
        Ok(Self {
            t0: self.time(start),
            t1: self.time(end),
            steps: end - start,
        })
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        let tol = 1e-9 * (self.t1 - self.t0).abs().max(1.0);
        self.steps == other.steps
            && (self.t0 - other.t0).abs() <= tol
            && (self.t1 - other.t1).abs() <= tol
    }
}

/// Brownian increments for `n_common` common-noise scenarios of
/// `n_particles` particles each.
#[derive(Debug, Clone)]
pub struct NoiseEnsemble {
    n_common: usize,
    n_particles: usize,
    grid: TimeGrid,
    seed: u64,
    dw: Vec<f64>,
    dw_common: Vec<f64>,
    dw_bar: Vec<f64>,
}

/// Draw the increments. Each particle owns the stream `(seed, scenario,
/// particle + 1)` and each scenario's common path owns `(seed, scenario, 0)`,
/// so the common path does not move when `n_particles` changes.
pub fn sample_noise(
    n_common: usize,
    n_particles: usize,
    grid: TimeGrid,
    seed: u64,
) -> Result<NoiseEnsemble> {
    if n_common == 0 {
        return Err(invalid("n_common", "must be >= 1"));
    }
    if n_particles == 0 {
        return Err(invalid("n_particles", "must be >= 1"));
    }
    let steps = grid.steps;
    let sd = grid.dt().sqrt();
    let mut dw = vec![0.0; n_common * steps * n_particles];
    let mut dw_common = vec![0.0; n_common * steps];
    let mut dw_bar = vec![0.0; n_common * steps];
    dw.par_chunks_mut(steps * n_particles)
        .zip(dw_common.par_chunks_mut(steps))
        .zip(dw_bar.par_chunks_mut(steps))
        .enumerate()
        .for_each(|(i, ((block, common), bar))| {
            let mut rng = keyed(seed, DOMAIN_NOISE, i as u64, 0);
            for c in common.iter_mut() {
                *c = sd * rng.sample::<f64, _>(StandardNormal);
            }
            for j in 0..n_particles {
                let mut rng = keyed(seed, DOMAIN_NOISE, i as u64, j as u64 + 1);
                for k in 0..steps {
                    block[k * n_particles + j] = sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for (k, b) in bar.iter_mut().enumerate() {
                *b = block[k * n_particles..(k + 1) * n_particles]
                    .iter()
                    .sum::<f64>()
                    / n_particles as f64;
            }
        });
    Ok(NoiseEnsemble {
        n_common,
        n_particles,
        grid,
        seed,
        dw,
        dw_common,
        dw_bar,
    })
}

impl NoiseEnsemble {
    pub fn n_common(&self) -> usize {
        self.n_common
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Idiosyncratic increment of `(scenario, particle)` over step `step`.
    pub fn dw(&self, scenario: usize, particle: usize, step: usize) -> f64 {
        self.dw[(scenario * self.grid.steps + step) * self.n_particles + particle]
    }

    pub fn dw_common(&self, scenario: usize, step: usize) -> f64 {
        self.dw_common[scenario * self.grid.steps + step]
    }

    /// Common Brownian path `W̃` of a scenario at every node (starting at 0).
    pub fn common_path(&self, scenario: usize) -> Vec<f64> {
        let mut path = Vec::with_capacity(self.grid.steps + 1);
        let mut w = 0.0;
        path.push(w);
        for k in 0..self.grid.steps {
            w += self.dw_common(scenario, k);
            path.push(w);
        }
        path
    }

    pub fn full(&self) -> NoiseWindow<'_> {
        NoiseWindow {
            noise: self,
            offset: 0,
            steps: self.grid.steps,
        }
    }

    /// Increments for steps `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<NoiseWindow<'_>> {
        if start >= end || end > self.grid.steps {
            return Err(invalid(
                "window",
                format!("steps {start}..{end} outside 0..{}", self.grid.steps),
            ));
        }
        Ok(NoiseWindow {
            noise: self,
            offset: start,
            steps: end - start,
        })
    }
}

/// A contiguous range of steps of a [`NoiseEnsemble`]; step indices passed to
/// the accessors are relative to the window start.
#[derive(Debug, Clone, Copy)]
pub struct NoiseWindow<'a> {
    noise: &'a NoiseEnsemble,
    offset: usize,
    steps: usize,
}

impl<'a> NoiseWindow<'a> {
    pub fn grid(&self) -> TimeGrid {
        self.noise
            .grid
            .sub(self.offset, self.offset + self.steps)
            .expect("window bounds checked at construction")
    }

    /// Step size of the parent grid (sub-grids may differ in the last bit).
    pub fn dt(&self) -> f64 {
        self.noise.grid.dt()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_common(&self) -> usize {
        self.noise.n_common
    }

    pub fn n_particles(&self) -> usize {
        self.noise.n_particles
    }

    pub fn ensemble(&self) -> &'a NoiseEnsemble {
        self.noise
    }

    #[inline]
    pub fn idiosyncratic(&self, scenario: usize, step: usize) -> &'a [f64] {
        let np = self.noise.n_particles;
        let base = (scenario * self.noise.grid.steps + self.offset + step) * np;
        &self.noise.dw[base..base + np]
    }

    #[inline]
    pub fn common(&self, scenario: usize, step: usize) -> f64 {
        self.noise.dw_common[scenario * self.noise.grid.steps + self.offset + step]
    }

    #[inline]
    pub fn cloud_mean(&self, scenario: usize, step: usize) -> f64 {
        self.noise.dw_bar[scenario * self.noise.grid.steps + self.offset + step]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    Dirac { x0: f64 },
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl InitialDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialDistribution::Dirac { x0 } if !x0.is_finite() => {
                Err(invalid("x0", "must be finite"))
            }
            InitialDistribution::Gaussian { mean, std } => {
                if !mean.is_finite() {
                    Err(invalid("mean", "must be finite"))
                } else if !(std.is_finite() && std >= 0.0) {
                    Err(invalid("std", "must be finite and >= 0"))
                } else {
                    Ok(())
                }
            }
            InitialDistribution::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    Err(invalid("high", "need finite low <= high"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitialDistribution::Dirac { x0 } => x0,
            InitialDistribution::Gaussian { mean, .. } => mean,
            InitialDistribution::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            InitialDistribution::Dirac { x0 } => x0 * x0,
            InitialDistribution::Gaussian { mean, std } => mean * mean + std * std,
            InitialDistribution::Uniform { low, high } => {
                (low * low + low * high + high * high) / 3.0
            }
        }
    }
}

/// I.i.d. initial states laid out `[scenario][particle]`.
pub fn sample_initial(
    distribution: &InitialDistribution,
    n_common: usize,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    distribution.validate()?;
    if n_common == 0 || n_particles == 0 {
        return Err(invalid("n_particles", "ensemble dimensions must be >= 1"));
    }
    let mut out = vec![0.0; n_common * n_particles];
    out.par_chunks_mut(n_particles)
        .enumerate()
        .for_each(|(i, chunk)| {
            for (j, v) in chunk.iter_mut().enumerate() {
                let mut rng = keyed(seed, DOMAIN_INITIAL, i as u64, j as u64);
                *v = match *distribution {
                    InitialDistribution::Dirac { x0 } => x0,
                    InitialDistribution::Gaussian { mean, std } => {
                        mean + std * rng.sample::<f64, _>(StandardNormal)
                    }
                    InitialDistribution::Uniform { low, high } => {
                        if low == high {
                            low
                        } else {
                            rng.random_range(low..=high)
                        }
                    }
                };
            }
        });
    Ok(out)
}

/// Feedback control `α(t_k, x, m̄, m₂) = Σ_j c_{k,j} φ_j(x, m̄, m₂)`, one
/// coefficient row per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    grid: TimeGrid,
    basis: RegressionBasis,
    coeffs: Vec<f64>,
}

impl ControlField {
    pub fn from_rows(grid: TimeGrid, basis: RegressionBasis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.nodes() * basis.len() {
            return Err(MfgError::ShapeMismatch(format!(
                "{} coefficients for {} nodes x {} features",
                coeffs.len(),
                grid.nodes(),
                basis.len()
            )));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(MfgError::NonFiniteValue {
                index: i,
                value: coeffs[i],
            });
        }
        Ok(Self {
            grid,
            basis,
            coeffs,
        })
    }

    pub fn zero(grid: TimeGrid, basis: RegressionBasis) -> Self {
        let coeffs = vec![0.0; grid.nodes() * basis.len()];
        Self {
            grid,
            basis,
            coeffs,
        }
    }

    /// `α ≡ value`, over whatever basis is given (the constant feature must
    /// be present).
    pub fn constant_in(grid: TimeGrid, basis: RegressionBasis, value: f64) -> Result<Self> {
        let idx = basis
            .features
            .iter()
            .position(|f| *f == crate::conditional::Feature::Const)
            .ok_or_else(|| invalid("basis", "constant control needs the constant feature"))?;
        let mut field = Self::zero(grid, basis);
        let p = field.basis.len();
        for k in 0..grid.nodes() {
            field.coeffs[k * p + idx] = value;
        }
        Ok(field)
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self::constant_in(grid, RegressionBasis::constant(), value)
            .expect("constant basis has the constant feature")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let p = self.basis.len();
        &self.coeffs[node * p..(node + 1) * p]
    }

    pub fn set_row(&mut self, node: usize, row: &[f64]) {
        let p = self.basis.len();
        self.coeffs[node * p..(node + 1) * p].copy_from_slice(row);
    }

    #[inline]
    pub fn eval(&self, node: usize, x: f64, mean: f64, m2: f64) -> f64 {
        self.basis.dot(self.row(node), x, mean, m2)
    }

    /// Row `node` as a quadratic `[c₀, c₁, c₂]` in `x` for fixed moments.
    #[inline]
    pub fn collapse(&self, node: usize, mean: f64, m2: f64) -> [f64; 3] {
        self.basis.collapse(self.row(node), mean, m2)
    }

    /// `(1 - λ)·self + λ·target`, coefficient-wise.
    pub fn blend(&self, target: &ControlField, damping: f64) -> Result<Self> {
        if self.basis != target.basis || !self.grid.same_as(&target.grid) {
            return Err(MfgError::ShapeMismatch(
                "blend needs a common grid and basis".into(),
            ));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&target.coeffs)
            .map(|(a, b)| (1.0 - damping) * a + damping * b)
            .collect();
        Ok(Self {
            grid: self.grid,
            basis: self.basis.clone(),
            coeffs,
        })
    }

    /// Re-express the field over `basis`, which must contain every feature
    /// of the current one.
    pub fn in_basis(&self, basis: &RegressionBasis) -> Result<Self> {
        if *basis == self.basis {
            return Ok(self.clone());
        }
        let map: Vec<usize> = self
            .basis
            .features
            .iter()
            .map(|f| {
                basis
                    .features
                    .iter()
                    .position(|g| g == f)
                    .ok_or_else(|| invalid("basis", format!("target basis lacks {f:?}")))
            })
            .collect::<Result<_>>()?;
        let p = self.basis.len();
        let mut out = Self::zero(self.grid, basis.clone());
        let q = basis.len();
        for k in 0..self.grid.nodes() {
            for (j, &t) in map.iter().enumerate() {
                out.coeffs[k * q + t] = self.coeffs[k * p + j];
            }
        }
        Ok(out)
    }

    /// Rows for nodes `start..=end` of this field's grid.
    pub fn restrict(&self, start: usize, end: usize) -> Result<Self> {
        let grid = self.grid.sub(start, end)?;
        let p = self.basis.len();
        Ok(Self {
            grid,
            basis: self.basis.clone(),
            coeffs: self.coeffs[start * p..(end + 1) * p].to_vec(),
        })
    }

    /// Join fields on consecutive intervals. Each interval contributes its
    /// rows except the last; the final interval also contributes its
    /// terminal row.
    pub fn concat(parts: &[ControlField]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("parts", "nothing to concatenate"))?;
        let basis = first.basis.clone();
        let p = basis.len();
        let dt = first.grid.dt();
        let mut coeffs = Vec::new();
        let mut steps = 0;
        for (idx, part) in parts.iter().enumerate() {
            if part.basis != basis {
                return Err(MfgError::ShapeMismatch("mixed bases".into()));
            }
            if idx > 0 {
                let prev = &parts[idx - 1].grid;
                if (prev.t1 - part.grid.t0).abs() > 1e-9 || (part.grid.dt() - dt).abs() > 1e-12 {
                    return Err(MfgError::ShapeMismatch(
                        "intervals are not contiguous on a common grid".into(),
                    ));
                }
            }
            let last = idx + 1 == parts.len();
            let rows = if last {
                part.grid.nodes()
            } else {
                part.grid.steps
            };
            coeffs.extend_from_slice(&part.coeffs[..rows * p]);
            steps += part.grid.steps;
        }
        let grid = TimeGrid {
            t0: first.grid.t0,
            t1: parts[parts.len() - 1].grid.t1,
            steps,
        };
        Self::from_rows(grid, basis, coeffs)
    }
}

/// State trajectories of every particle in every scenario.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_common: usize,
    n_particles: usize,
    /// Step offset of this ensemble within its noise ensemble.
    noise_offset: usize,
    x: Vec<f64>,
    /// `Σ xᵖ`, `p = 0..=4`, per (scenario, node).
    sums: Vec<PowerSums>,
}

/// Power sums `Σ xᵖ`, `p = 0..=4`, of one cloud.
pub type PowerSums = [f64; 5];

impl PathEnsemble {
    /// Build from explicit states laid out `[scenario][node][particle]`.
    pub fn from_states(
        grid: TimeGrid,
        n_common: usize,
        n_particles: usize,
        x: Vec<f64>,
    ) -> Result<Self> {
        if x.len() != n_common * grid.nodes() * n_particles {
            return Err(MfgError::ShapeMismatch(format!(
                "{} states for {n_common} x {} x {n_particles}",
                x.len(),
                grid.nodes()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(MfgError::NonFiniteValue {
                index: i,
                value: x[i],
            });
        }
        let nodes = grid.nodes();
        let sums = (0..n_common * nodes)
            .map(|idx| power_sums(&x[idx * n_particles..(idx + 1) * n_particles]))
            .collect();
        Ok(Self {
            grid,
            n_common,
            n_particles,
            noise_offset: 0,
            x,
            sums,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_common(&self) -> usize {
        self.n_common
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn noise_offset(&self) -> usize {
        self.noise_offset
    }

    pub fn n_samples(&self) -> usize {
        self.n_common * self.n_particles
    }

    #[inline]
    pub fn cloud(&self, scenario: usize, node: usize) -> &[f64] {
        let base = (scenario * self.grid.nodes() + node) * self.n_particles;
        &self.x[base..base + self.n_particles]
    }

    pub fn state(&self, scenario: usize, particle: usize, node: usize) -> f64 {
        self.cloud(scenario, node)[particle]
    }

    /// `(m̄, m₂)` of the scenario's cloud at `node`.
    #[inline]
    pub fn moments(&self, scenario: usize, node: usize) -> (f64, f64) {
        let s = &self.sums[scenario * self.grid.nodes() + node];
        (s[1] / s[0], s[2] / s[0])
    }

    /// `Σ xᵖ`, `p = 0..=4`, over the scenario's cloud at `node`.
    #[inline]
    pub fn power_sums(&self, scenario: usize, node: usize) -> &PowerSums {
        &self.sums[scenario * self.grid.nodes() + node]
    }

    /// States at `node` laid out `[scenario][particle]`.
    pub fn states_at(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_samples());
        for i in 0..self.n_common {
            out.extend_from_slice(self.cloud(i, node));
        }
        out
    }

    /// Export `(scenario, particle, node, X)` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scenario,particle,node,x")?;
        for i in 0..self.n_common {
            for k in 0..self.grid.nodes() {
                for (j, x) in self.cloud(i, k).iter().enumerate() {
                    writeln!(out, "{i},{j},{k},{x:e}")?;
                }
            }
        }
        Ok(())
    }
}

fn power_sums(xs: &[f64]) -> PowerSums {
    let mut s = [xs.len() as f64, 0.0, 0.0, 0.0, 0.0];
    for &x in xs {
        let x2 = x * x;
        s[1] += x;
        s[2] += x2;
        s[3] += x2 * x;
        s[4] += x2 * x2;
    }
    s
}

/// Euler–Maruyama propagation
/// `X_{k+1} = X_k + α(t_k, X_k, m̄_k, m₂_k) dt + σ dW_k + σ̃ dW̃_k`,
/// with `(m̄_k, m₂_k)` the moments of the scenario's own cloud at step `k`.
pub fn propagate(
    control: &ControlField,
    init: &[f64],
    noise: &NoiseWindow<'_>,
    sigma: f64,
    sigma_tilde: f64,
) -> Result<PathEnsemble> {
    let grid = noise.grid();
    if !control.grid().same_as(&grid) {
        return Err(MfgError::ShapeMismatch(format!(
            "control grid {:?} does not match noise window {:?}",
            control.grid(),
            grid
        )));
    }
    let nc = noise.n_common();
    let np = noise.n_particles();
    if init.len() != nc * np {
        return Err(MfgError::ShapeMismatch(format!(
            "{} initial states for {nc} x {np} samples",
            init.len()
        )));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(invalid("sigma", "must be finite and >= 0"));
    }
    if !(sigma_tilde.is_finite() && sigma_tilde >= 0.0) {
        return Err(invalid("sigma_tilde", "must be finite and >= 0"));
    }
    let nodes = grid.nodes();
    let dt = noise.dt();
    let mut x = vec![0.0; nc * nodes * np];
    let mut sums = vec![[0.0; 5]; nc * nodes];
    let failures: Vec<Option<usize>> = x
        .par_chunks_mut(nodes * np)
        .zip(sums.par_chunks_mut(nodes))
        .enumerate()
        .map(|(i, (block, mom))| {
            block[..np].copy_from_slice(&init[i * np..(i + 1) * np]);
            for k in 0..grid.steps {
                let (head, tail) = block.split_at_mut((k + 1) * np);
                let cur = &head[k * np..];
                let next = &mut tail[..np];
                mom[k] = power_sums(cur);
                let (mean, m2) = (mom[k][1] / mom[k][0], mom[k][2] / mom[k][0]);
                let [p0, p1, p2] = control.collapse(k, mean, m2);
                let shock = sigma_tilde * noise.common(i, k);
                let dws = noise.idiosyncratic(i, k);
                let mut finite = true;
                for ((n, &c), &dw) in next.iter_mut().zip(cur).zip(dws) {
                    let v = c + (p0 + (p1 + p2 * c) * c) * dt + sigma * dw + shock;
                    finite &= v.is_finite();
                    *n = v;
                }
                if !finite {
                    return Some(k);
                }
            }
            mom[grid.steps] = power_sums(&block[grid.steps * np..]);
            None
        })
        .collect();
    if let Some(step) = failures.into_iter().flatten().min() {
        return Err(MfgError::NonFiniteState { step });
    }
    Ok(PathEnsemble {
        grid,
        n_common: nc,
        n_particles: np,
        noise_offset: noise.offset(),
        x,
        sums,
    })
}

/// Per-(scenario, node) empirical conditional laws of a path ensemble.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalFlow<'a> {
    paths: &'a PathEnsemble,
}

pub fn conditional_flow(paths: &PathEnsemble) -> ConditionalFlow<'_> {
    ConditionalFlow { paths }
}

impl ConditionalFlow<'_> {
    pub fn n_common(&self) -> usize {
        self.paths.n_common
    }

    pub fn nodes(&self) -> usize {
        self.paths.grid.nodes()
    }

    pub fn measure(&self, scenario: usize, node: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_samples(self.paths.cloud(scenario, node))
            .expect("propagated states are finite")
    }

    pub fn mean(&self, scenario: usize, node: usize) -> f64 {
        self.paths.moments(scenario, node).0
    }

    pub fn second_moment(&self, scenario: usize, node: usize) -> f64 {
        self.paths.moments(scenario, node).1
    }

    /// Terminal measure of every scenario.
    pub fn terminal_measures(&self) -> Vec<EmpiricalMeasure> {
        let last = self.paths.grid.steps;
        (0..self.n_common())
            .map(|i| self.measure(i, last))
            .collect()
    }
}
