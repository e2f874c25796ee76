//! Monte Carlo estimators: the Bismut formula `D^L_φ (P_T f)(μ) = E[f(X_T) δ(h^φ)]`,
//! its finite-difference oracle, the L-derivative norm bound and a
//! total-variation probe.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fbm::{generate_batch, PathBatch, VolterraWeights};
use crate::grid::{HurstParam, TimeGrid};
use crate::measure::{moment, wasserstein, EmpiricalMeasure, TestFunction};
use crate::model::{Direction, Model, ModelKind};
use crate::quad::GaussLegendre;
use crate::rng::{stream, Domain};
use crate::sensitivity::{
    build_h_degenerate, build_h_nondegenerate, shift_states, skorokhod_delta, variation_flow, BismutIntegrand,
    BuildOptions,
};
use crate::solver::{solve_euler, ParticleEnsemble};
use crate::stats::{mean_se, mean_var};

/// Default finite-difference steps.
pub const DEFAULT_EPS: [f64; 3] = [0.1, 0.05, 0.025];

/// Clamp radius in units of the terminal second moment.
pub const CLAMP_FACTOR: f64 = 10.0;

/// Grid, Hurst index, ensemble size and seed of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub grid: TimeGrid,
    pub hurst: HurstParam,
    pub n_paths: usize,
    pub seed: u64,
}

/// Noise, initial states and the solved particle system.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: RunSpec,
    pub noise: PathBatch,
    pub init: Vec<f64>,
    pub ens: ParticleEnsemble,
}

impl Simulation {
    /// Same noise, initial states shifted by `εφ`.
    pub fn shifted(&self, model: &Model, phi: &Direction, eps: f64) -> Result<ParticleEnsemble> {
        let init = shift_states(&self.init, model.dim(), phi, eps);
        solve_euler(model.drift.as_ref(), &model.diffusion, &init, &self.noise)
    }
}

pub fn simulate(model: &Model, spec: RunSpec) -> Result<Simulation> {
    model.validate()?;
    if spec.n_paths < 2 {
        return Err(invalid("n_paths", "need at least 2 paths"));
    }
    let weights = VolterraWeights::new(spec.grid, spec.hurst)?;
    let noise = generate_batch(&weights, model.diffusion.noise_dim(), spec.n_paths, spec.seed)?;
    let init = model.init.sample(spec.n_paths, spec.seed);
    let ens = solve_euler(model.drift.as_ref(), &model.diffusion, &init, &noise)?;
    Ok(Simulation { spec, noise, init, ens })
}

/// `f` itself if it declares a sup bound, otherwise `R tanh(f / R)` with
/// `R = 10 · (second moment of X_T)`.
pub fn bounded(f: &TestFunction, sim: &Simulation) -> Result<TestFunction> {
    if f.sup_bound().is_some() {
        return Ok(f.clone());
    }
    f.clamped(clamp_radius(&sim.ens)?)
}

pub fn clamp_radius(ens: &ParticleEnsemble) -> Result<f64> {
    let r = CLAMP_FACTOR * moment(&ens.terminal(), 2.0)?;
    if r > 0.0 {
        Ok(r)
    } else {
        Err(invalid("clamp", "terminal ensemble is identically zero"))
    }
}

/// `E sech²(Z/R)` for `Z ~ N(0, sd²)`: the derivative of
/// `E[R tanh((x + Z)/R)]` at `x = 0`.
pub fn clamped_linear_oracle(sd: f64, radius: f64) -> f64 {
    let gl = GaussLegendre::new(40);
    let lim = 12.0;
    gl.integrate_composite(-lim, lim, 24, |z| {
        let s = 1.0 / (sd * z / radius).cosh();
        s * s * (-0.5 * z * z).exp()
    }) / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BismutEstimate {
    pub value: f64,
    pub std_error: f64,
    pub centered_value: f64,
    pub centered_std_error: f64,
    pub n_paths: usize,
    pub f: String,
    pub phi: String,
    pub model_kind: String,
    /// Sample mean of `δ`; should vanish within its SE.
    pub delta_mean: f64,
    pub delta_std_error: f64,
    /// `(1/N) Σ ∫|ζ_i|²`
    pub energy: f64,
    /// Relative L² gap between the two `ζ` routes.
    pub route_discrepancy: f64,
    /// Degenerate models only: `max |g(T)|` and the Gramian's least eigenvalue.
    pub g_terminal_max: Option<f64>,
    pub gramian_min_eigenvalue: Option<f64>,
}

/// The direction `h^φ` for any model kind.
pub fn integrand(model: &Model, sim: &Simulation, phi: &Direction) -> Result<(BismutIntegrand, Option<(f64, f64)>)> {
    let var = variation_flow(&sim.ens, model.drift.as_ref(), phi)?;
    let opts = BuildOptions { keep_generic: false };
    match &model.kind {
        ModelKind::NonDegenerate => Ok((build_h_nondegenerate(&sim.ens, &var, &model.diffusion, sim.spec.hurst, opts)?, None)),
        kind => {
            let (bi, diag) = build_h_degenerate(kind, &sim.ens, &var, model.drift.as_ref(), &model.diffusion, sim.spec.hurst, opts)?;
            Ok((bi, Some((diag.g_terminal_max, diag.gramian_min_eigenvalue))))
        }
    }
}

/// Bismut estimate on an existing simulation. `f` must be bounded; see [`bounded`].
pub fn estimate_bismut_on(model: &Model, sim: &Simulation, f: &TestFunction, phi: &Direction) -> Result<BismutEstimate> {
    let (bi, deg) = integrand(model, sim, phi)?;
    estimate_from_integrand(model, sim, f, phi, &bi, deg)
}

/// As [`estimate_bismut_on`] with `h^φ` already built by [`integrand`].
pub fn estimate_from_integrand(
    model: &Model,
    sim: &Simulation,
    f: &TestFunction,
    phi: &Direction,
    bi: &BismutIntegrand,
    deg: Option<(f64, f64)>,
) -> Result<BismutEstimate> {
    let delta = skorokhod_delta(bi, &sim.noise)?;
    let term = sim.ens.terminal();
    let fx: Vec<f64> = term.atoms().par_chunks_exact(term.dim()).map(|x| f.eval(x)).collect();
    if let Some(i) = fx.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { particle: i, step: sim.spec.grid.n_steps() });
    }
    let (fbar, _) = mean_var(&fx);
    let plain: Vec<f64> = fx.iter().zip(&delta).map(|(a, d)| a * d).collect();
    let centered: Vec<f64> = fx.iter().zip(&delta).map(|(a, d)| (a - fbar) * d).collect();
    let (value, std_error) = mean_se(&plain);
    let (centered_value, centered_std_error) = mean_se(&centered);
    let (delta_mean, delta_std_error) = mean_se(&delta);
    Ok(BismutEstimate {
        value,
        std_error,
        centered_value,
        centered_std_error,
        n_paths: sim.spec.n_paths,
        f: f.name().to_string(),
        phi: phi.name().to_string(),
        model_kind: model.kind.label().to_string(),
        delta_mean,
        delta_std_error,
        energy: bi.mean_energy(),
        route_discrepancy: bi.route_discrepancy(),
        g_terminal_max: deg.map(|d| d.0),
        gramian_min_eigenvalue: deg.map(|d| d.1),
    })
}

/// Simulates, clamps `f` if needed and estimates.
pub fn estimate_bismut(model: &Model, f: &TestFunction, phi: &Direction, spec: RunSpec) -> Result<BismutEstimate> {
    let sim = simulate(model, spec)?;
    let f = bounded(f, &sim)?;
    estimate_bismut_on(model, &sim, &f, phi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEstimate {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Two-point Richardson extrapolation over the two smallest steps.
    pub extrapolated: f64,
    pub std_error: f64,
}

/// Finite-difference quotients with common random numbers.
pub fn estimate_fd_on(model: &Model, sim: &Simulation, f: &TestFunction, phi: &Direction, eps: &[f64]) -> Result<FdEstimate> {
    if eps.len() < 2 || eps.windows(2).any(|w| !(w[1] < w[0])) || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("eps", "need at least two positive, strictly decreasing steps"));
    }
    let eval = |ens: &ParticleEnsemble| -> Vec<f64> {
        let t = ens.terminal();
        t.atoms().par_chunks_exact(t.dim()).map(|x| f.eval(x)).collect()
    };
    let base = eval(&sim.ens);
    let mut quotients = Vec::with_capacity(eps.len());
    for &e in eps {
        let shifted = eval(&sim.shifted(model, phi, e)?);
        quotients.push(shifted.iter().zip(&base).map(|(a, b)| (a - b) / e).collect::<Vec<f64>>());
    }
    let stats: Vec<(f64, f64)> = quotients.iter().map(|q| mean_se(q)).collect();
    let m = eps.len();
    let (e1, e2) = (eps[m - 2], eps[m - 1]);
    let rich: Vec<f64> = quotients[m - 1]
        .iter()
        .zip(&quotients[m - 2])
        .map(|(d2, d1)| (e1 * d2 - e2 * d1) / (e1 - e2))
        .collect();
    let (extrapolated, std_error) = mean_se(&rich);
    Ok(FdEstimate {
        eps: eps.to_vec(),
        values: stats.iter().map(|s| s.0).collect(),
        std_errors: stats.iter().map(|s| s.1).collect(),
        extrapolated,
        std_error,
    })
}

pub fn estimate_fd(model: &Model, f: &TestFunction, phi: &Direction, eps: &[f64], spec: RunSpec) -> Result<FdEstimate> {
    let sim = simulate(model, spec)?;
    let f = bounded(f, &sim)?;
    estimate_fd_on(model, &sim, &f, phi, eps)
}

/// Outcome of the L-derivative norm estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormEstimate {
    /// `max_φ |E f(X_T) δ(h^φ)|` over the orthonormalized basis.
    pub sup_estimate: f64,
    /// `max_φ (∫ E|ζ^φ|²)^{1/2}`, the factor that scales like `T^{-H}`.
    pub bound_factor: f64,
    /// `(Var f(X_T))^{1/2}`
    pub variance_factor: f64,
    /// `sup_estimate / (bound_factor · variance_factor)`; at most 1 up to noise.
    pub ratio: f64,
    pub kept: Vec<String>,
    /// Directions removed as linearly dependent in `L²(μ)`.
    pub dropped: Vec<String>,
}

/// Gram–Schmidt in `L²(μ̂_0)`; directions whose residual norm falls below
/// `1e-8` of their own norm are dropped.
pub fn orthonormalize(basis: &[Direction], mu: &EmpiricalMeasure) -> (Vec<Direction>, Vec<String>) {
    let d = mu.dim();
    let eval = |phi: &Direction| -> Vec<f64> {
        let mut out = vec![0.0; mu.len() * d];
        for (x, o) in mu.iter().zip(out.chunks_exact_mut(d)) {
            phi.eval(x, o);
        }
        out
    };
    let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / mu.len() as f64;
    let mut kept: Vec<(Direction, Vec<f64>)> = Vec::new();
    let mut dropped = Vec::new();
    for phi in basis {
        let v0 = eval(phi);
        let n0 = inner(&v0, &v0).sqrt();
        let mut dir = phi.clone();
        let mut v = v0;
        for (e, ev) in &kept {
            let c = inner(&v, ev);
            dir = Direction::combine(1.0, &dir, -c, e);
            v.iter_mut().zip(ev).for_each(|(a, b)| *a -= c * b);
        }
        let n = inner(&v, &v).sqrt();
        if !(n > 1e-8 * n0) || n0 == 0.0 {
            dropped.push(phi.name().to_string());
            continue;
        }
        let unit = dir.scaled(1.0 / n);
        v.iter_mut().for_each(|a| *a /= n);
        kept.push((Direction::new(phi.name().to_string(), move |x, o| unit.eval(x, o)), v));
    }
    (kept.into_iter().map(|k| k.0).collect(), dropped)
}

pub fn lderiv_norm_estimate_on(model: &Model, sim: &Simulation, f: &TestFunction, basis: &[Direction]) -> Result<NormEstimate> {
    let mu0 = EmpiricalMeasure::new(model.dim(), sim.init.clone())?;
    let (dirs, dropped) = orthonormalize(basis, &mu0);
    let term = sim.ens.terminal();
    let fx: Vec<f64> = term.atoms().par_chunks_exact(term.dim()).map(|x| f.eval(x)).collect();
    let (_, var_f) = mean_var(&fx);
    let mut sup_estimate = 0.0f64;
    let mut bound_factor = 0.0f64;
    for phi in &dirs {
        let est = estimate_bismut_on(model, sim, f, phi)?;
        sup_estimate = sup_estimate.max(est.centered_value.abs());
        bound_factor = bound_factor.max(est.energy.sqrt());
    }
    let variance_factor = var_f.sqrt();
    let denom = bound_factor * variance_factor;
    Ok(NormEstimate {
        sup_estimate,
        bound_factor,
        variance_factor,
        ratio: if denom > 0.0 { sup_estimate / denom } else { 0.0 },
        kept: dirs.iter().map(|d| d.name().to_string()).collect(),
        dropped,
    })
}

pub fn lderiv_norm_estimate(model: &Model, f: &TestFunction, basis: &[Direction], spec: RunSpec) -> Result<NormEstimate> {
    let sim = simulate(model, spec)?;
    let f = bounded(f, &sim)?;
    lderiv_norm_estimate_on(model, &sim, &f, basis)
}

/// `cos(<w, x> + b)` with `w ~ N(0, scale² I)`, `b ~ U(0, 2π)`.
pub fn cosine_family(dim: usize, count: usize, scale: f64, seed: u64) -> Vec<TestFunction> {
    (0..count)
        .map(|j| {
            let mut rng = stream(seed, Domain::TestFunctions, j as u64, 0);
            let w: Vec<f64> = (0..dim).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let b = rng.random::<f64>() * std::f64::consts::TAU;
            TestFunction::cosine_feature(w, b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvReport {
    pub shifts: Vec<f64>,
    pub w2: Vec<f64>,
    /// `max_f |E f(X_T^μ) - E f(X_T^ν)|` over the family.
    pub tv_lower: Vec<f64>,
    pub ratio: Vec<f64>,
    /// `max ratio / min ratio`
    pub spread: f64,
    /// Same lower bounds using only the first half of the family.
    pub tv_lower_half_family: Vec<f64>,
}

/// `ν_c = μ` translated by `c` along the first axis, on common noise.
pub fn tv_probe_on(model: &Model, sim: &Simulation, shifts: &[f64], family: &[TestFunction]) -> Result<TvReport> {
    if family.is_empty() {
        return Err(invalid("family", "empty test-function family"));
    }
    for f in family {
        match f.sup_bound() {
            Some(s) if s <= 1.0 => {}
            _ => return Err(invalid("family", format!("`{}` is not bounded by 1", f.name()))),
        }
    }
    let d = model.dim();
    let mu0 = EmpiricalMeasure::new(d, sim.init.clone())?;
    let means = |ens: &ParticleEnsemble| -> Vec<f64> {
        let t = ens.terminal();
        family.iter().map(|f| t.expect(|x| f.eval(x))).collect()
    };
    let base = means(&sim.ens);
    let half = family.len().div_ceil(2);
    let mut report = TvReport {
        shifts: shifts.to_vec(),
        w2: Vec::new(),
        tv_lower: Vec::new(),
        ratio: Vec::new(),
        spread: 0.0,
        tv_lower_half_family: Vec::new(),
    };
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let unit = Direction::constant(e1);
    for &c in shifts {
        let nu0 = EmpiricalMeasure::new(d, shift_states(&sim.init, d, &unit, c))?;
        let w2 = wasserstein(&mu0, &nu0, 2.0)?;
        let other = means(&sim.shifted(model, &unit, c)?);
        let gaps: Vec<f64> = base.iter().zip(&other).map(|(a, b)| (a - b).abs()).collect();
        let tv = gaps.iter().cloned().fold(0.0, f64::max);
        report.tv_lower_half_family.push(gaps[..half].iter().cloned().fold(0.0, f64::max));
        report.w2.push(w2);
        report.tv_lower.push(tv);
        report.ratio.push(if w2 > 0.0 { tv / w2 } else { 0.0 });
    }
    let (lo, hi) = report
        .ratio
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(*r), hi.max(*r)));
    report.spread = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    Ok(report)
}

pub fn tv_probe(model: &Model, shifts: &[f64], family: &[TestFunction], spec: RunSpec) -> Result<TvReport> {
    tv_probe_on(model, &simulate(model, spec)?, shifts, family)
}

/// One row of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub model: String,
    pub f: String,
    pub phi: String,
    pub n_paths: usize,
    pub seed: u64,
    pub estimate: f64,
    pub se: f64,
    pub oracle: f64,
    pub oracle_se: f64,
    pub pass: bool,
}

impl Report {
    /// Pass iff `|estimate - oracle| <= 3 sqrt(se² + oracle_se²)`.
    pub fn compare(model: &str, f: &str, phi: &str, spec: &RunSpec, est: (f64, f64), oracle: (f64, f64)) -> Self {
        let tol = 3.0 * (est.1 * est.1 + oracle.1 * oracle.1).sqrt();
        Self {
            model: model.into(),
            f: f.into(),
            phi: phi.into(),
            n_paths: spec.n_paths,
            seed: spec.seed,
            estimate: est.0,
            se: est.1,
            oracle: oracle.0,
            oracle_se: oracle.1,
            pass: (est.0 - oracle.0).abs() <= tol,
        }
    }
}
