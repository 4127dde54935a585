//! Cost evaluation, optimality certificates and the linear-quadratic oracle.
//!
//! Monte-Carlo standard errors are computed from per-scenario averages:
//! particles sharing a common-noise path are not independent, scenarios are.
//! With a single scenario the particle-level error is used instead.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conditional::{Feature, RegressionBasis};
use crate::costs::TerminalCost;
use crate::error::{invalid, MfgError, Result};
use crate::fbsde::{solve_inner, FrozenTerminal, InnerConfig};
use crate::measures::EmpiricalMeasure;
use crate::mfg::{
    h2_norm, solve_mfg, Discretization, Ensemble, MfgModel, MfgSolution, SolverConfig,
};
use crate::paths::{
    conditional_flow, propagate, ControlField, NoiseWindow, PathEnsemble, TimeGrid,
};
use crate::rng::{keyed, DOMAIN_PERTURB};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    /// Monte-Carlo mean of `Σ ½α² dt + g(X_T, m_T)`.
    pub j: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Mean and standard error from per-scenario block averages.
fn block_stats(blocks: &[f64], fallback: impl FnOnce() -> f64) -> (f64, f64) {
    let n = blocks.len() as f64;
    let mean = blocks.iter().sum::<f64>() / n;
    let stderr = if blocks.len() >= 2 {
        let var = blocks.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        fallback()
    };
    (mean, stderr)
}

fn sample_stderr(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Per-sample realized cost `Σ ½α² dt + g(X_T, m_i)` laid out
/// `[scenario][particle]`.
fn sample_costs(
    control: &ControlField,
    paths: &PathEnsemble,
    cost: &TerminalCost,
    terminal: &[EmpiricalMeasure],
) -> Vec<f64> {
    let grid = paths.grid();
    let dt = grid.dt();
    let np = paths.n_particles();
    let mut out = vec![0.0; paths.n_samples()];
    out.par_chunks_mut(np).enumerate().for_each(|(i, chunk)| {
        for k in 0..grid.steps {
            let (m, m2) = paths.moments(i, k);
            for (o, &x) in chunk.iter_mut().zip(paths.cloud(i, k)) {
                let a = control.eval(k, x, m, m2);
                *o += 0.5 * a * a * dt;
            }
        }
        let frozen = cost.freeze(&terminal[i]);
        for (o, &x) in chunk.iter_mut().zip(paths.cloud(i, grid.steps)) {
            *o += frozen.g(x);
        }
    });
    out
}

fn report(samples: &[f64], n_common: usize) -> CostReport {
    let np = samples.len() / n_common;
    let blocks: Vec<f64> = samples
        .chunks(np)
        .map(|c| c.iter().sum::<f64>() / np as f64)
        .collect();
    let (j, stderr) = block_stats(&blocks, || sample_stderr(samples));
    CostReport {
        j,
        stderr,
        n_samples: samples.len(),
    }
}

/// `J(α | m)` with the terminal law frozen per scenario.
pub fn evaluate_cost(
    control: &ControlField,
    model: &MfgModel,
    init: &[f64],
    noise: &NoiseWindow<'_>,
    terminal: &[EmpiricalMeasure],
) -> Result<CostReport> {
    if terminal.len() != noise.n_common() {
        return Err(MfgError::ShapeMismatch(format!(
            "{} frozen measures for {} scenarios",
            terminal.len(),
            noise.n_common()
        )));
    }
    let paths = propagate(control, init, noise, model.vol.sigma, model.vol.sigma_tilde)?;
    Ok(report(
        &sample_costs(control, &paths, &model.cost, terminal),
        noise.n_common(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmpGap {
    /// `J(β) − J(α̂) − ½‖α̂ − β‖²`.
    pub gap: f64,
    /// Standard error of `gap` (paired over the common ensemble).
    pub stderr: f64,
    pub j_hat: f64,
    pub j_beta: f64,
    /// `‖α̂ − β‖_{H²}` between the realized control processes.
    pub distance: f64,
}

/// Optimality-gap estimate for `α̂` against `β` under a frozen terminal law.
/// Both controls are run on the same noise; the H² distance is between the
/// realized processes `α̂(X^α̂)` and `β(X^β)`.
pub fn smp_gap(
    alpha_hat: &ControlField,
    beta: &ControlField,
    model: &MfgModel,
    init: &[f64],
    noise: &NoiseWindow<'_>,
    terminal: &[EmpiricalMeasure],
) -> Result<SmpGap> {
    if !alpha_hat.grid().same_as(beta.grid()) {
        return Err(MfgError::ShapeMismatch("controls must share a grid".into()));
    }
    let vol = model.vol;
    let pa = propagate(alpha_hat, init, noise, vol.sigma, vol.sigma_tilde)?;
    let pb = propagate(beta, init, noise, vol.sigma, vol.sigma_tilde)?;
    let ca = sample_costs(alpha_hat, &pa, &model.cost, terminal);
    let cb = sample_costs(beta, &pb, &model.cost, terminal);
    let grid = pa.grid();
    let dt = grid.dt();
    let np = pa.n_particles();
    let mut dist2 = vec![0.0; pa.n_samples()];
    dist2.par_chunks_mut(np).enumerate().for_each(|(i, chunk)| {
        for k in 0..grid.steps {
            let (ma, ma2) = pa.moments(i, k);
            let (mb, mb2) = pb.moments(i, k);
            for ((o, &xa), &xb) in chunk.iter_mut().zip(pa.cloud(i, k)).zip(pb.cloud(i, k)) {
                let d = alpha_hat.eval(k, xa, ma, ma2) - beta.eval(k, xb, mb, mb2);
                *o += d * d * dt;
            }
        }
    });
    let per_sample: Vec<f64> = (0..ca.len())
        .map(|n| cb[n] - ca[n] - 0.5 * dist2[n])
        .collect();
    let rep = report(&per_sample, pa.n_common());
    let n = ca.len() as f64;
    Ok(SmpGap {
        gap: rep.j,
        stderr: rep.stderr,
        j_hat: ca.iter().sum::<f64>() / n,
        j_beta: cb.iter().sum::<f64>() / n,
        distance: (dist2.iter().sum::<f64>() / n).sqrt(),
    })
}

/// `count` bounded perturbations of `control`: each adds a random constant,
/// a random multiple of `x` and a random time-varying shift, all of size at
/// most `amplitude`.
pub fn random_perturbations(
    control: &ControlField,
    count: usize,
    amplitude: f64,
    seed: u64,
) -> Result<Vec<ControlField>> {
    if !(amplitude.is_finite() && amplitude > 0.0) {
        return Err(invalid("amplitude", "must be finite and > 0"));
    }
    let mut features = control.basis().features.clone();
    for f in [Feature::Const, Feature::X] {
        if !features.contains(&f) {
            features.push(f);
        }
    }
    let basis = RegressionBasis::new(features, control.basis().ridge)?;
    let base = control.in_basis(&basis)?;
    let c_idx = basis
        .features
        .iter()
        .position(|f| *f == Feature::Const)
        .unwrap();
    let x_idx = basis
        .features
        .iter()
        .position(|f| *f == Feature::X)
        .unwrap();
    let grid = *control.grid();
    (0..count)
        .map(|n| {
            let mut rng = keyed(seed, DOMAIN_PERTURB, n as u64, 0);
            let shift: f64 = rng.random_range(-amplitude..=amplitude);
            let slope: f64 = rng.random_range(-amplitude..=amplitude);
            let wave: f64 = rng.random_range(-amplitude..=amplitude);
            let freq: f64 = rng.random_range(0.5..=3.0);
            let mut field = base.clone();
            for k in 0..grid.nodes() {
                let tau = (grid.time(k) - grid.t0) / (grid.t1 - grid.t0);
                let mut row = field.row(k).to_vec();
                row[c_idx] += shift + wave * (std::f64::consts::TAU * freq * tau).sin();
                row[x_idx] += slope;
                field.set_row(k, &row);
            }
            Ok(field)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Exploitability {
    /// `J(α̂ | m^α̂) − J(BR | m^α̂)`.
    pub value: f64,
    pub stderr: f64,
    pub j_equilibrium: f64,
    pub j_best_response: f64,
    pub best_response_converged: bool,
}

/// Deviation incentive: freeze the terminal law of `control`'s own flow,
/// best-respond with the inner solver, and compare costs on the same noise.
pub fn exploitability(
    control: &ControlField,
    model: &MfgModel,
    ensemble: &Ensemble,
    inner: &InnerConfig,
) -> Result<Exploitability> {
    let noise = ensemble.noise.full();
    let vol = model.vol;
    let own = propagate(control, &ensemble.init, &noise, vol.sigma, vol.sigma_tilde)?;
    let measures = conditional_flow(&own).terminal_measures();
    let frozen = FrozenTerminal::Cost {
        cost: &model.cost,
        measures: &measures,
    };
    let br = solve_inner(
        &frozen,
        &ensemble.init,
        &noise,
        vol,
        control.basis(),
        inner,
        Some(control),
    )?;
    let ce = sample_costs(control, &own, &model.cost, &measures);
    let cb = sample_costs(&br.control, &br.paths, &model.cost, &measures);
    let diff: Vec<f64> = ce.iter().zip(&cb).map(|(a, b)| a - b).collect();
    let rep = report(&diff, own.n_common());
    let n = ce.len() as f64;
    Ok(Exploitability {
        value: rep.j,
        stderr: rep.stderr,
        j_equilibrium: ce.iter().sum::<f64>() / n,
        j_best_response: cb.iter().sum::<f64>() / n,
        best_response_converged: br.converged,
    })
}

/// Affine equilibrium feedback `Y_t = a_t X_t + b_t m̄_t` of the
/// mean-tracking quadratic family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqOracle {
    pub q: f64,
    pub q_bar: f64,
    pub s: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// `k_T / (1 + k_T (T − t))`, the solution of `k̇ = k²` ending at `k_T`.
fn riccati(k_t: f64, remaining: f64) -> f64 {
    k_t / (1.0 + k_t * remaining)
}

/// Closed-form oracle on `grid`, which must end at `horizon`:
/// `a_T = 2(q + q̄)`, `c_T = 2(q + q̄(1 − s))`, both following `k̇ = k²`, and
/// `b = c − a`.
pub fn lq_oracle(q: f64, q_bar: f64, s: f64, horizon: f64, grid: &TimeGrid) -> Result<LqOracle> {
    for (name, v) in [("q", q), ("q_bar", q_bar), ("s", s)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid(name, "must be finite and >= 0"));
        }
    }
    if !(horizon.is_finite() && horizon > 0.0) || (grid.t1 - horizon).abs() > 1e-9 {
        return Err(invalid("horizon", "grid must end at the horizon"));
    }
    let a_t = 2.0 * (q + q_bar);
    let c_t = 2.0 * (q + q_bar * (1.0 - s));
    if c_t < 0.0 {
        return Err(invalid("s", "need q + q_bar >= s * q_bar"));
    }
    let times: Vec<f64> = (0..grid.nodes()).map(|k| grid.time(k)).collect();
    let a: Vec<f64> = times.iter().map(|t| riccati(a_t, horizon - t)).collect();
    let b = times
        .iter()
        .zip(&a)
        .map(|(t, a)| riccati(c_t, horizon - t) - a)
        .collect();
    Ok(LqOracle {
        q,
        q_bar,
        s,
        horizon,
        times,
        a,
        b,
    })
}

/// Oracle for the cost families that have one.
pub fn oracle_for(cost: &TerminalCost, horizon: f64, grid: &TimeGrid) -> Option<LqOracle> {
    match *cost {
        TerminalCost::TrackMean { q, q_bar, s } => lq_oracle(q, q_bar, s, horizon, grid).ok(),
        TerminalCost::StateOnlyQuadratic { a } => lq_oracle(a, 0.0, 0.0, horizon, grid).ok(),
        _ => None,
    }
}

impl LqOracle {
    pub fn c(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a + b).collect()
    }

    /// `α = −(a_t x + b_t m̄)` on `grid`, which must match the oracle's nodes.
    pub fn control(&self, grid: &TimeGrid) -> Result<ControlField> {
        if grid.nodes() != self.times.len() {
            return Err(MfgError::ShapeMismatch("oracle grid mismatch".into()));
        }
        let mut coeffs = Vec::with_capacity(3 * grid.nodes());
        for (a, b) in self.a.iter().zip(&self.b) {
            coeffs.extend_from_slice(&[0.0, -a, -b]);
        }
        ControlField::from_rows(*grid, RegressionBasis::affine().with_ridge(0.0), coeffs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,a,b,c\n");
        for k in 0..self.times.len() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                self.times[k],
                self.a[k],
                self.b[k],
                self.a[k] + self.b[k]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleDeviation {
    pub a0_fitted: f64,
    pub b0_fitted: f64,
    pub a0_oracle: f64,
    pub b0_oracle: f64,
    /// `|â₀ − a₀| / |a₀|`.
    pub a0_rel: f64,
    /// `|b̂₀ − b₀| / |b₀|`, absolute when `b₀ = 0`.
    pub b0_rel: f64,
    /// `‖α − α_oracle‖ / ‖α_oracle‖` along the solution's paths.
    pub h2_rel: f64,
}

impl OracleDeviation {
    pub fn max(&self) -> f64 {
        self.a0_rel.max(self.b0_rel).max(self.h2_rel)
    }
}

fn rel(fitted: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        fitted.abs()
    } else {
        ((fitted - exact) / exact).abs()
    }
}

/// Compare the fitted feedback at `t = 0` and the full control with the
/// oracle.
pub fn oracle_deviation(
    control: &ControlField,
    paths: &PathEnsemble,
    oracle: &LqOracle,
) -> Result<OracleDeviation> {
    let coeff = |f: Feature| {
        control
            .basis()
            .features
            .iter()
            .position(|g| *g == f)
            .map_or(0.0, |j| -control.row(0)[j])
    };
    let (a0, b0) = (coeff(Feature::X), coeff(Feature::Mean));
    let exact = oracle.control(control.grid())?;
    let dist = crate::mfg::h2_distance(control, &exact, paths)?;
    let norm = h2_norm(&exact, paths)?;
    Ok(OracleDeviation {
        a0_fitted: a0,
        b0_fitted: b0,
        a0_oracle: oracle.a[0],
        b0_oracle: oracle.b[0],
        a0_rel: rel(a0, oracle.a[0]),
        b0_rel: rel(b0, oracle.b[0]),
        h2_rel: if norm > 1e-12 { dist / norm } else { dist },
    })
}

/// `W₂` between a scenario cloud of `n` atoms and a pooled cloud of `k·n`
/// atoms: quantile blocks of the pooled cloud pair with single atoms.
fn w2_against_pooled(cloud: &mut [f64], pooled_sorted: &[f64]) -> f64 {
    cloud.sort_by(f64::total_cmp);
    let block = pooled_sorted.len() / cloud.len();
    let mut s = 0.0;
    for (j, &x) in cloud.iter().enumerate() {
        for &p in &pooled_sorted[j * block..(j + 1) * block] {
            s += (x - p) * (x - p);
        }
    }
    (s / pooled_sorted.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    /// Max over nodes of the RMS over scenarios of `W₂(scenario, pooled)`.
    pub w2_spread: f64,
    /// Max over nodes of `std(pooled) / √n_particles`.
    pub mc_scale: f64,
    pub spread_ratio: f64,
    pub oracle: Option<OracleDeviation>,
}

/// Cross-scenario spread of the conditional flow of `paths`.
pub fn flow_spread(paths: &PathEnsemble) -> (f64, f64) {
    let nodes = paths.grid().nodes();
    let per_node: Vec<(f64, f64)> = (0..nodes)
        .into_par_iter()
        .map(|k| {
            let mut pooled = paths.states_at(k);
            let n = pooled.len() as f64;
            let mean = pooled.iter().sum::<f64>() / n;
            let std = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            pooled.sort_by(f64::total_cmp);
            let ms: f64 = (0..paths.n_common())
                .map(|i| {
                    let mut c = paths.cloud(i, k).to_vec();
                    w2_against_pooled(&mut c, &pooled).powi(2)
                })
                .sum::<f64>()
                / paths.n_common() as f64;
            (ms.sqrt(), std / (paths.n_particles() as f64).sqrt())
        })
        .collect();
    per_node
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), &(s, m)| (a.max(s), b.max(m)))
}

/// Without common noise every scenario should carry the same deterministic
/// flow: solve and measure the cross-scenario spread, plus the oracle
/// deviation when the cost has an oracle.
pub fn reduction_check_sigma_tilde_zero(
    model: &MfgModel,
    disc: &Discretization,
    config: &SolverConfig,
    ensemble: &Ensemble,
) -> Result<(MfgSolution, ReductionReport)> {
    if model.vol.sigma_tilde != 0.0 {
        return Err(invalid(
            "sigma_tilde",
            "reduction check needs sigma_tilde = 0",
        ));
    }
    let sol = solve_mfg(model, disc, config, ensemble)?;
    let (w2_spread, mc_scale) = flow_spread(&sol.paths);
    let grid = ensemble.grid();
    let oracle = match oracle_for(&model.cost, model.horizon, &grid) {
        Some(o) => Some(oracle_deviation(&sol.control, &sol.paths, &o)?),
        None => None,
    };
    let report = ReductionReport {
        w2_spread,
        mc_scale,
        spread_ratio: if mc_scale > 0.0 {
            w2_spread / mc_scale
        } else {
            w2_spread
        },
        oracle,
    };
    Ok((sol, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanMartingaleReport {
    /// Per node: RMS over scenarios of `m̄_t − m̄_0 − σ̃W̃_t`.
    pub rms_deviation: Vec<f64>,
    /// Per node: Monte-Carlo standard error `σ √(t / n_particles)`.
    pub stderr: Vec<f64>,
    /// Max over nodes `k ≥ 1` of `rms_deviation / stderr`.
    pub worst_ratio: f64,
    /// Per node: RMS of the drift part alone, i.e. with the cloud's own
    /// idiosyncratic noise average removed.
    pub drift_rms: Vec<f64>,
}

/// Check that `m̄_t − σ̃W̃_t` stays at its initial value along `paths`.
pub fn mean_martingale_check(
    paths: &PathEnsemble,
    ensemble: &Ensemble,
    model: &MfgModel,
) -> MeanMartingaleReport {
    let grid = paths.grid();
    let nc = paths.n_common();
    let np = paths.n_particles() as f64;
    let noise = &ensemble.noise;
    let window = noise.full();
    let mut rms = vec![0.0; grid.nodes()];
    let mut drift = vec![0.0; grid.nodes()];
    for i in 0..nc {
        let w = noise.common_path(i);
        let m0 = paths.moments(i, 0).0;
        let mut wbar = 0.0;
        for k in 0..grid.nodes() {
            if k > 0 {
                wbar += window.cloud_mean(i, k - 1);
            }
            let d = paths.moments(i, k).0 - m0 - model.vol.sigma_tilde * w[k];
            rms[k] += d * d;
            let e = d - model.vol.sigma * wbar;
            drift[k] += e * e;
        }
    }
    let rms: Vec<f64> = rms.iter().map(|s| (s / nc as f64).sqrt()).collect();
    let drift_rms = drift.iter().map(|s| (s / nc as f64).sqrt()).collect();
    let stderr: Vec<f64> = (0..grid.nodes())
        .map(|k| model.vol.sigma * ((grid.time(k) - grid.t0) / np).sqrt())
        .collect();
    let worst_ratio = (1..grid.nodes())
        .map(|k| {
            if stderr[k] > 0.0 {
                rms[k] / stderr[k]
            } else if rms[k] <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    MeanMartingaleReport {
        rms_deviation: rms,
        stderr,
        worst_ratio,
        drift_rms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriReport {
    pub sup_x2: f64,
    pub sup_y2: f64,
    /// `E[ξ₀²] + g_x(0, δ₀)² + σ² + σ̃²`.
    pub scale: f64,
    /// `max(sup_x2, sup_y2) / scale`.
    pub ratio: f64,
}

/// Sup-over-time second moments of `X` and `Y = −α` against the data scale.
pub fn apriori_ratio(
    control: &ControlField,
    paths: &PathEnsemble,
    model: &MfgModel,
) -> AprioriReport {
    let grid = paths.grid();
    let n = paths.n_samples() as f64;
    let (mut sup_x2, mut sup_y2) = (0.0f64, 0.0f64);
    for k in 0..grid.nodes() {
        let (mut x2, mut y2) = (0.0, 0.0);
        for i in 0..paths.n_common() {
            let (m, m2) = paths.moments(i, k);
            for &x in paths.cloud(i, k) {
                x2 += x * x;
                let y = control.eval(k, x, m, m2);
                y2 += y * y;
            }
        }
        sup_x2 = sup_x2.max(x2 / n);
        sup_y2 = sup_y2.max(y2 / n);
    }
    let dirac = EmpiricalMeasure::dirac(0.0).expect("finite");
    let gx0 = model.cost.freeze(&dirac).g_x(0.0);
    let scale = model.initial.second_moment()
        + gx0 * gx0
        + model.vol.sigma.powi(2)
        + model.vol.sigma_tilde.powi(2);
    AprioriReport {
        sup_x2,
        sup_y2,
        scale,
        ratio: sup_x2.max(sup_y2) / scale.max(f64::MIN_POSITIVE),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::Volatility;
    use crate::paths::{sample_noise, InitialDistribution};

    fn model(
        cost: TerminalCost,
        sigma: f64,
        sigma_tilde: f64,
        initial: InitialDistribution,
    ) -> MfgModel {
        MfgModel {
            cost,
            vol: Volatility::new(sigma, sigma_tilde).unwrap(),
            horizon: 1.0,
            initial,
        }
    }

    fn frozen(paths: &PathEnsemble) -> Vec<EmpiricalMeasure> {
        conditional_flow(paths).terminal_measures()
    }

    #[test]
    fn cost_of_zero_control_without_noise_is_zero() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = sample_noise(2, 5, g, 1).unwrap();
        let m = model(
            TerminalCost::state_only(1.0).unwrap(),
            0.0,
            0.0,
            InitialDistribution::Dirac { x0: 0.0 },
        );
        let zero = ControlField::constant(g, 0.0);
        let p = propagate(&zero, &[0.0; 10], &noise.full(), 0.0, 0.0).unwrap();
        let r = evaluate_cost(&zero, &m, &[0.0; 10], &noise.full(), &frozen(&p)).unwrap();
        assert_eq!(r.j, 0.0);
        assert_eq!(r.n_samples, 10);
    }

    #[test]
    fn cost_of_unit_control_is_one_half() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = sample_noise(2, 5, g, 1).unwrap();
        let m = model(
            TerminalCost::zero(),
            0.0,
            0.0,
            InitialDistribution::Dirac { x0: 0.0 },
        );
        let one = ControlField::constant(g, 1.0);
        let p = propagate(&one, &[0.0; 10], &noise.full(), 0.0, 0.0).unwrap();
        let r = evaluate_cost(&one, &m, &[0.0; 10], &noise.full(), &frozen(&p)).unwrap();
        assert!((r.j - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_tracking_cost_of_zero_control_is_sigma_squared() {
        // X_T − m̄_T = σ (W_T − W̄_T): E = σ² T (1 − 1/n)
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let noise = sample_noise(40, 500, g, 3).unwrap();
        let m = model(
            TerminalCost::track_mean(0.0, 1.0, 1.0).unwrap(),
            1.0,
            0.7,
            InitialDistribution::Dirac { x0: 0.0 },
        );
        let zero = ControlField::constant(g, 0.0);
        let init = vec![0.0; 20_000];
        let p = propagate(&zero, &init, &noise.full(), 1.0, 0.7).unwrap();
        let r = evaluate_cost(&zero, &m, &init, &noise.full(), &frozen(&p)).unwrap();
        assert!((r.j - (1.0 - 1.0 / 500.0)).abs() < 3.0 * r.stderr, "{r:?}");
    }

    #[test]
    fn oracle_closed_forms() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let o = lq_oracle(1.0, 1.0, 1.0, 1.0, &g).unwrap();
        assert!((o.a[0] - 0.8).abs() < 1e-14);
        assert!((o.c()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((o.b[0] + 2.0 / 15.0).abs() < 1e-14);
        let o = lq_oracle(0.0, 1.0, 1.0, 1.0, &g).unwrap();
        assert!(o.c().iter().all(|c| c.abs() < 1e-15));
        assert!((o.a[0] - 2.0 / 3.0).abs() < 1e-14);
        let o = lq_oracle(1.0, 0.0, 0.7, 1.0, &g).unwrap();
        assert!(o.b.iter().all(|b| b.abs() < 1e-15));
        assert!(lq_oracle(0.0, 1.0, 2.0, 1.0, &g).is_err());
        assert!(lq_oracle(1.0, 1.0, 1.0, 2.0, &g).is_err());
    }

    #[test]
    fn oracle_solves_the_riccati_equations() {
        // ȧ = a², ċ = c², and b = c − a obeys ḃ = 2ab + b²; central
        // differences, relative error
        let h = 1e-4;
        let g = TimeGrid::new(0.0, 1.0, 10_000).unwrap();
        let o = lq_oracle(1.0, 1.0, 1.0, 1.0, &g).unwrap();
        let c = o.c();
        for k in [1usize, 2500, 5000, 9999] {
            let da = (o.a[k + 1] - o.a[k - 1]) / (2.0 * h);
            let dc = (c[k + 1] - c[k - 1]) / (2.0 * h);
            let db = (o.b[k + 1] - o.b[k - 1]) / (2.0 * h);
            let close = |d: f64, rhs: f64| (d - rhs).abs() <= 1e-6 * rhs.abs().max(1.0);
            assert!(close(da, o.a[k].powi(2)));
            assert!(close(dc, c[k].powi(2)));
            assert!(close(db, 2.0 * o.a[k] * o.b[k] + o.b[k].powi(2)));
        }
    }

    #[test]
    fn oracle_control_rows() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let o = lq_oracle(1.0, 1.0, 1.0, 1.0, &g).unwrap();
        let c = o.control(&g).unwrap();
        let row = c.row(0);
        assert_eq!(row[0], 0.0);
        assert!((row[1] + 0.8).abs() < 1e-14);
        assert!((row[2] - 2.0 / 15.0).abs() < 1e-14);
        assert!(o.to_csv().starts_with("t,a,b,c\n"));
        assert!(oracle_for(&TerminalCost::MeanSquareDistance, 1.0, &g).is_none());
        let so = oracle_for(&TerminalCost::state_only(1.0).unwrap(), 1.0, &g).unwrap();
        assert!((so.a[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn smp_gap_of_identical_controls_is_zero() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = sample_noise(4, 50, g, 3).unwrap();
        let m = model(
            TerminalCost::track_mean(1.0, 1.0, 1.0).unwrap(),
            0.5,
            0.5,
            InitialDistribution::Dirac { x0: 0.0 },
        );
        let c = ControlField::constant(g, 0.3);
        let init = vec![0.0; 200];
        let p = propagate(&c, &init, &noise.full(), 0.5, 0.5).unwrap();
        let gap = smp_gap(&c, &c, &m, &init, &noise.full(), &frozen(&p)).unwrap();
        assert_eq!(gap.gap, 0.0);
        assert_eq!(gap.distance, 0.0);
    }

    #[test]
    fn perturbations_are_bounded_and_reproducible() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let base = ControlField::constant(g, 0.0)
            .in_basis(&RegressionBasis::affine())
            .unwrap();
        let a = random_perturbations(&base, 5, 0.2, 9).unwrap();
        let b = random_perturbations(&base, 5, 0.2, 9).unwrap();
        assert_eq!(a, b);
        for p in &a {
            for k in 0..g.nodes() {
                assert!(p.row(k)[0].abs() <= 0.4 + 1e-12);
                assert!(p.row(k)[1].abs() <= 0.2 + 1e-12);
            }
        }
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn mean_martingale_report_for_common_noise_only() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let m = model(
            TerminalCost::zero(),
            0.0,
            1.0,
            InitialDistribution::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
        );
        let disc = Discretization {
            steps: 10,
            n_common: 3,
            n_particles: 20,
            basis: RegressionBasis::affine(),
        };
        let ens = Ensemble::sample(&m, &disc, 2).unwrap();
        let p = propagate(
            &ControlField::constant(g, 0.0),
            &ens.init,
            &ens.noise.full(),
            0.0,
            1.0,
        )
        .unwrap();
        let r = mean_martingale_check(&p, &ens, &m);
        assert!(r.rms_deviation.iter().all(|d| d.abs() < 1e-12));
        assert_eq!(r.worst_ratio, 0.0);
    }

    #[test]
    fn pooled_w2_matches_generic_distance() {
        let cloud = vec![0.3, -1.0, 2.0];
        let pooled = vec![-1.5, -0.2, 0.0, 0.4, 1.1, 2.5];
        let w = w2_against_pooled(&mut cloud.clone(), &pooled);
        let direct = crate::measures::wasserstein2(
            &EmpiricalMeasure::from_samples(&cloud).unwrap(),
            &EmpiricalMeasure::from_samples(&pooled).unwrap(),
        );
        assert!((w - direct).abs() < 1e-14);
    }

    #[test]
    fn apriori_scale() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let m = model(
            TerminalCost::track_mean(1.0, 1.0, 1.0).unwrap(),
            0.5,
            0.5,
            InitialDistribution::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
        );
        let noise = sample_noise(2, 10, g, 1).unwrap();
        let c = ControlField::constant(g, 0.0);
        let p = propagate(&c, &[0.0; 20], &noise.full(), 0.5, 0.5).unwrap();
        let r = apriori_ratio(&c, &p, &m);
        assert!((r.scale - 1.5).abs() < 1e-12);
        assert_eq!(r.sup_y2, 0.0);
    }
}
