//! First-variation and Malliavin flows, and the Bismut direction `h^φ` with
//! its Wiener integrand `ζ = K_H^{-1}(R_H h^φ)`.
//!
//! `R_H h^φ` is always built from its derivative `q = σ^{-1} ρ`, piecewise
//! constant on cells. `ζ` is evaluated by two routes:
//!
//! - *expansion*: `ζ(t) = c_z q(t) t^{-a} + c_E t^a ∫_0^t s^{-a}(q(t)-q(s))(t-s)^{-1-a} ds`
//!   with `q(t)-q(s)` split into products of differences of the factors of `q`;
//! - *generic*: `K_H^{-1}` applied to `q` through the Weyl derivative.
//!
//! Both store the bounded factor `t^a ζ(t)`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::fbm::PathBatch;
use crate::frac_calc::{inverse_normalization, kh_inverse_with, power_rule_constant, SingularDifferenceTable, SingularGridFunction, WeylDerivative};
use crate::grid::{GridFunction, HurstParam, TimeGrid};
use crate::model::{Diffusion, Direction, Drift, ModelKind};
use crate::quad::GaussLegendre;
use crate::solver::{solve_euler, ParticleEnsemble};
use crate::stats::pairwise_sum;

/// `Γ = ∇_{φ(X_0)} X` for every particle, laid out like the ensemble.
#[derive(Debug, Clone)]
pub struct VariationEnsemble {
    grid: TimeGrid,
    n: usize,
    dim: usize,
    gamma: Vec<f64>,
    // (1/N) Σ_j D^L b(t_k, X_i, μ̂_k)(X_j) Γ_j, same layout.
    lions: Vec<f64>,
    direction: String,
}

impl VariationEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn direction(&self) -> &str {
        &self.direction
    }

    pub fn gamma(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.n + i) * self.dim;
        &self.gamma[o..o + self.dim]
    }

    /// Mean-field term of the variation equation at node `k`.
    pub fn lions_term(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.n + i) * self.dim;
        &self.lions[o..o + self.dim]
    }

    /// `a Γ^1 + b Γ^2` on the same ensemble.
    pub fn combine(a: f64, g1: &Self, b: f64, g2: &Self) -> Result<Self> {
        if g1.gamma.len() != g2.gamma.len() {
            return Err(Error::GridMismatch("variations of different shape".into()));
        }
        let lin = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect();
        Ok(Self {
            grid: g1.grid,
            n: g1.n,
            dim: g1.dim,
            gamma: lin(&g1.gamma, &g2.gamma),
            lions: lin(&g1.lions, &g2.lions),
            direction: format!("{a}*({}) + {b}*({})", g1.direction, g2.direction),
        })
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = (0..cols).map(|c| m[r * cols + c] * v[c]).sum();
    }
}

/// `(1/N) Σ_j ∇ψ(X_j) Γ_j`, a `p`-vector.
fn lions_average(drift: &dyn Drift, x: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let p = drift.n_features();
    if p == 0 {
        return Vec::new();
    }
    let n = x.len() / d;
    let per: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut jac = vec![0.0; p * d];
            drift.feature_jacobian(&x[j * d..(j + 1) * d], &mut jac);
            let mut out = vec![0.0; p];
            matvec(&jac, p, d, &g[j * d..(j + 1) * d], &mut out);
            out
        })
        .collect();
    (0..p)
        .map(|q| pairwise_sum(&(0..n).map(|j| per[j * p + q]).collect::<Vec<_>>()) / n as f64)
        .collect()
}

/// Euler scheme for the variation equation
/// `dΓ_i = [∇b(X_i) Γ_i + (1/N) Σ_j D^L b(X_i)(X_j) Γ_j] dt`, `Γ_i(0) = φ(X_i(0))`.
///
/// The expectation over an independent copy is the ensemble average,
/// self-pairing included.
pub fn variation_flow(ens: &ParticleEnsemble, drift: &dyn Drift, phi: &Direction) -> Result<VariationEnsemble> {
    let grid = *ens.grid();
    let (n, d) = (ens.len(), ens.dim());
    let p = drift.n_features();
    let dt = grid.dt();
    let steps = grid.n_steps();
    let mut gamma = vec![0.0; (steps + 1) * n * d];
    let mut lions = vec![0.0; (steps + 1) * n * d];
    for i in 0..n {
        phi.eval(ens.state(0, i), &mut gamma[i * d..(i + 1) * d]);
    }
    for k in 0..=steps {
        let t = grid.t(k);
        let x = ens.column(k);
        let m = ens.feature_means(k);
        let (done, rest) = gamma.split_at_mut((k + 1) * n * d);
        let g = &done[k * n * d..];
        let s = lions_average(drift, x, g, d);
        let lk = &mut lions[k * n * d..(k + 1) * n * d];
        lk.par_chunks_mut(d).enumerate().for_each(|(i, li)| {
            let mut gm = vec![0.0; d * p];
            drift.grad_m(t, &x[i * d..(i + 1) * d], m, &mut gm);
            matvec(&gm, d, p, &s, li);
        });
        if k == steps {
            break;
        }
        let lk = &lions[k * n * d..(k + 1) * n * d];
        rest[..n * d].par_chunks_mut(d).enumerate().for_each(|(i, gi)| {
            let mut gx = vec![0.0; d * d];
            drift.grad_x(t, &x[i * d..(i + 1) * d], m, &mut gx);
            let gc = &g[i * d..(i + 1) * d];
            matvec(&gx, d, d, gc, gi);
            for c in 0..d {
                gi[c] = gc[c] + (gi[c] + lk[i * d + c]) * dt;
            }
        });
        if let Some(pos) = rest[..n * d].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { particle: pos / d, step: k + 1 });
        }
    }
    Ok(VariationEnsemble {
        grid,
        n,
        dim: d,
        gamma,
        lions,
        direction: phi.name().to_string(),
    })
}

/// Finite-difference check of the variation process.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationCheck {
    pub eps: Vec<f64>,
    /// `(1/N) Σ_i max_k |(X^ε - X)/ε - Γ|²`
    pub mean_sq_error: Vec<f64>,
    /// `(1/N) Σ_i max_k |X^ε - X|² / ε²`
    pub ui_ratio: Vec<f64>,
    /// Log-log slope of `mean_sq_error` in `ε`.
    pub order: f64,
}

/// Re-solves with initial states shifted by `εφ` on identical noise and
/// compares the difference quotient with `Γ`.
pub fn variation_fd_check(
    drift: &dyn Drift,
    diff: &Diffusion,
    init: &[f64],
    noise: &PathBatch,
    phi: &Direction,
    eps: &[f64],
) -> Result<VariationCheck> {
    let base = solve_euler(drift, diff, init, noise)?;
    let var = variation_flow(&base, drift, phi)?;
    let (n, d) = (base.len(), base.dim());
    let nodes = base.grid().n_nodes();
    let mut mse = Vec::new();
    let mut ui = Vec::new();
    for &e in eps {
        let shifted = shift_states(init, d, phi, e);
        let pert = solve_euler(drift, diff, &shifted, noise)?;
        let per: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut worst = (0.0f64, 0.0f64);
                for k in 0..nodes {
                    let (a, b, g) = (pert.state(k, i), base.state(k, i), var.gamma(k, i));
                    let mut err = 0.0;
                    let mut dist = 0.0;
                    for c in 0..d {
                        let diff = a[c] - b[c];
                        err += (diff / e - g[c]).powi(2);
                        dist += diff * diff;
                    }
                    worst = (worst.0.max(err), worst.1.max(dist));
                }
                worst
            })
            .collect();
        let (errs, dists): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
        mse.push(pairwise_sum(&errs) / n as f64);
        ui.push(pairwise_sum(&dists) / n as f64 / (e * e));
    }
    let order = if eps.len() >= 2 && mse.iter().all(|v| *v > 0.0) {
        crate::stats::log_log_slope(eps, &mse)
    } else {
        f64::NAN
    };
    Ok(VariationCheck {
        eps: eps.to_vec(),
        mean_sq_error: mse,
        ui_ratio: ui,
        order,
    })
}

/// `x_i + ε φ(x_i)` for row-major states.
pub fn shift_states(init: &[f64], d: usize, phi: &Direction, eps: f64) -> Vec<f64> {
    let mut out = init.to_vec();
    let mut v = vec![0.0; d];
    for x in out.chunks_exact_mut(d) {
        phi.eval(x, &mut v);
        for (a, b) in x.iter_mut().zip(&v) {
            *a += eps * b;
        }
    }
    out
}

/// `D_{R_H h} X` with the law frozen:
/// `Y_{k+1} = Y_k + ∇b(X_k) Y_k Δ + σ(t_k)(R_H h(t_{k+1}) - R_H h(t_k))`.
///
/// `rh` holds `R_H h` per particle, particle-major with `r = σ` columns:
/// entry `(i * (n+1) + k) * r + c`.
pub fn malliavin_flow_particles(
    ens: &ParticleEnsemble,
    drift: &dyn Drift,
    diff: &Diffusion,
    rh: &[f64],
) -> Result<Vec<f64>> {
    let grid = *ens.grid();
    let (n, d) = (ens.len(), ens.dim());
    let r = diff.noise_dim();
    let nodes = grid.n_nodes();
    if rh.len() != n * nodes * r {
        return Err(invalid("rh", format!("expected {} values, got {}", n * nodes * r, rh.len())));
    }
    let dt = grid.dt();
    let rows = diff.noisy_rows().to_vec();
    let sig: Vec<DMatrix<f64>> = (0..grid.n_steps()).map(|k| diff.sigma(grid.t(k))).collect();
    let mut y = vec![0.0; nodes * n * d];
    for k in 0..grid.n_steps() {
        let t = grid.t(k);
        let m = ens.feature_means(k);
        let x = ens.column(k);
        let (done, rest) = y.split_at_mut((k + 1) * n * d);
        let yc = &done[k * n * d..];
        let s = &sig[k];
        rest[..n * d].par_chunks_mut(d).enumerate().for_each(|(i, yi)| {
            let mut gx = vec![0.0; d * d];
            drift.grad_x(t, &x[i * d..(i + 1) * d], m, &mut gx);
            let cur = &yc[i * d..(i + 1) * d];
            matvec(&gx, d, d, cur, yi);
            for c in 0..d {
                yi[c] = cur[c] + yi[c] * dt;
            }
            let o = (i * nodes + k) * r;
            for (ri, &row) in rows.iter().enumerate() {
                yi[row] += (0..r).map(|c| s[(ri, c)] * (rh[o + r + c] - rh[o + c])).sum::<f64>();
            }
        });
        if let Some(pos) = rest[..n * d].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { particle: pos / d, step: k + 1 });
        }
    }
    Ok(y)
}

/// [`malliavin_flow_particles`] with one deterministic `R_H h` shared by all
/// particles. The result is laid out like the ensemble.
pub fn malliavin_flow(ens: &ParticleEnsemble, drift: &dyn Drift, diff: &Diffusion, h: &GridFunction) -> Result<Vec<f64>> {
    ens.grid().ensure_same(h.grid())?;
    if h.dim() != diff.noise_dim() {
        return Err(invalid("h", format!("dimension {} but σ has {} columns", h.dim(), diff.noise_dim())));
    }
    if h.at(0).iter().any(|v| *v != 0.0) {
        return Err(invalid("h", "R_H h must vanish at t = 0"));
    }
    malliavin_flow_particles(ens, drift, diff, &h.values().repeat(ens.len()))
}

/// Which evaluation of `ζ` feeds the Wiener integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZetaRoute {
    Expansion,
    Generic,
}

/// Options for the Bismut-direction builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Keep the generic-route `ζ` (otherwise only its discrepancy is kept).
    pub keep_generic: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { keep_generic: true }
    }
}

/// `h^φ` in terms of its derivative `q = σ^{-1} ρ` and the integrand `ζ`.
#[derive(Debug, Clone)]
pub struct BismutIntegrand {
    grid: TimeGrid,
    hurst: HurstParam,
    kind: &'static str,
    n: usize,
    r: usize,
    // Particle-major: (i * (n_steps+1) + k) * r + c.
    q: Vec<f64>,
    zeta: Vec<f64>,
    zeta_generic: Option<Vec<f64>>,
    route_gap: f64,
}

impl BismutIntegrand {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// `"nondegenerate"` or `"degenerate"`.
    pub fn kind(&self) -> &'static str {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn noise_dim(&self) -> usize {
        self.r
    }

    fn slice<'a>(&self, v: &'a [f64], i: usize) -> &'a [f64] {
        let w = self.grid.n_nodes() * self.r;
        &v[i * w..(i + 1) * w]
    }

    /// `σ^{-1} ρ` at the nodes, constant on `[t_k, t_{k+1})`.
    pub fn rho(&self, i: usize) -> GridFunction {
        GridFunction::new(self.grid, self.r, self.slice(&self.q, i).to_vec()).expect("shape")
    }

    /// `R_H h^φ(t_k) = Σ_{j<k} q_j Δ`.
    pub fn rh(&self, i: usize) -> GridFunction {
        GridFunction::new(self.grid, self.r, cumulative(self.slice(&self.q, i), self.r, self.grid.dt())).expect("shape")
    }

    /// All `R_H h` values, particle-major, as expected by [`malliavin_flow_particles`].
    pub fn rh_all(&self) -> Vec<f64> {
        let w = self.grid.n_nodes() * self.r;
        self.q.chunks_exact(w).flat_map(|q| cumulative(q, self.r, self.grid.dt())).collect()
    }

    pub fn zeta(&self, i: usize) -> SingularGridFunction {
        self.zeta_route(i, ZetaRoute::Expansion).expect("expansion route is always stored")
    }

    pub fn zeta_route(&self, i: usize, route: ZetaRoute) -> Option<SingularGridFunction> {
        let v = match route {
            ZetaRoute::Expansion => &self.zeta,
            ZetaRoute::Generic => self.zeta_generic.as_ref()?,
        };
        let g = GridFunction::new(self.grid, self.r, self.slice(v, i).to_vec()).expect("shape");
        Some(SingularGridFunction::new(self.hurst.alpha(), g))
    }

    /// `sqrt(Σ_i ‖ζ_i^exp - ζ_i^gen‖²) / sqrt(Σ_i ‖ζ_i^gen‖²)` in `L²(0,T)`.
    pub fn route_discrepancy(&self) -> f64 {
        self.route_gap
    }

    /// `(1/N) Σ_i ∫_0^T |ζ_i|² dt`.
    pub fn mean_energy(&self) -> f64 {
        let per: Vec<f64> = (0..self.n).into_par_iter().map(|i| self.zeta(i).l2_norm().powi(2)).collect();
        pairwise_sum(&per) / self.n as f64
    }

    /// `(1/N) Σ_i E_i` where `E_i` is the exact second moment of the
    /// discrete Wiener integral used by [`skorokhod_delta`].
    pub fn mean_adapted_energy(&self) -> f64 {
        let w = adapted_weights(&self.grid, self.hurst);
        let dt = self.grid.dt();
        let first = cell0_energy(&self.grid, self.hurst);
        let per: Vec<f64> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let z = self.slice(&self.zeta, i);
                let mut acc = z[..self.r].iter().map(|v| v * v).sum::<f64>() * first;
                for k in 1..self.grid.n_steps() {
                    acc += z[k * self.r..(k + 1) * self.r].iter().map(|v| v * v).sum::<f64>() * w[k] * w[k] * dt;
                }
                acc
            })
            .collect();
        pairwise_sum(&per) / self.n as f64
    }

    /// `ζ` dump for particle `i`: columns `t, zeta_1..zeta_r`.
    pub fn write_zeta_csv<W: Write>(&self, i: usize, mut out: W) -> io::Result<()> {
        write!(out, "t")?;
        for c in 0..self.r {
            write!(out, ",zeta_{}", c + 1)?;
        }
        writeln!(out)?;
        let z = self.zeta(i);
        for k in 0..self.grid.n_nodes() {
            write!(out, "{:e}", self.grid.t(k))?;
            for c in 0..self.r {
                write!(out, ",{:e}", z.value(k, c))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn cumulative(q: &[f64], r: usize, dt: f64) -> Vec<f64> {
    let nodes = q.len() / r;
    let mut out = vec![0.0; q.len()];
    for k in 1..nodes {
        for c in 0..r {
            out[k * r + c] = out[(k - 1) * r + c] + q[(k - 1) * r + c] * dt;
        }
    }
    out
}

/// Average of `s^{-a}` over cell `k` in units of `t_k^{-a}`, for `k >= 1`.
fn adapted_weights(grid: &TimeGrid, hurst: HurstParam) -> Vec<f64> {
    let a = hurst.alpha();
    let dt = grid.dt();
    (0..grid.n_steps())
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                (grid.t(k + 1).powf(1.0 - a) - grid.t(k).powf(1.0 - a)) / ((1.0 - a) * dt)
            }
        })
        .collect()
}

fn cell0_energy(grid: &TimeGrid, hurst: HurstParam) -> f64 {
    let a = hurst.alpha();
    grid.dt().powf(1.0 - 2.0 * a) / (1.0 - 2.0 * a)
}

/// Shared precomputation for the `ζ` routes.
struct ZetaEngine {
    grid: TimeGrid,
    hurst: HurstParam,
    table: SingularDifferenceTable,
    weyl: WeylDerivative,
    cz: f64,
    ce: f64,
    a: f64,
}

impl ZetaEngine {
    fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        let a = hurst.alpha();
        Ok(Self {
            grid,
            hurst,
            table: SingularDifferenceTable::new(grid, a)?,
            weyl: WeylDerivative::new(grid, a)?,
            cz: power_rule_constant(hurst),
            ce: inverse_normalization(hurst) * a / gamma(1.0 - a),
            a,
        })
    }

    /// Expansion route for one particle. `diff_at(k, j, c)` returns
    /// component `c` of `q(t_k) - q(t_j)` assembled from factor differences.
    fn expansion(&self, q: &[f64], r: usize, diff_at: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
        let nodes = self.grid.n_nodes();
        let dt = self.grid.dt();
        let mut out = vec![0.0; nodes * r];
        for k in 0..nodes {
            let t2a = self.grid.t(k).powf(2.0 * self.a);
            for c in 0..r {
                let e = if k == 0 {
                    0.0
                } else {
                    let slope = (q[k * r + c] - q[(k - 1) * r + c]) / dt;
                    self.table.eval_with(k, |j| diff_at(k, j, c), |_| 1.0, slope)
                };
                out[k * r + c] = self.cz * q[k * r + c] + self.ce * t2a * e;
            }
        }
        out
    }

    fn generic(&self, q: &[f64], r: usize) -> Result<Vec<f64>> {
        let g = GridFunction::new(self.grid, r, q.to_vec())?;
        Ok(kh_inverse_with(&self.weyl, &g, self.hurst)?.regular().values().to_vec())
    }
}

fn l2_sq(grid: &TimeGrid, a: f64, v: &[f64], r: usize) -> f64 {
    let g = GridFunction::new(*grid, r, v.to_vec()).expect("shape");
    SingularGridFunction::new(a, g).l2_norm().powi(2)
}

/// Runs both `ζ` routes for every particle; `build(i)` returns `q` and the
/// difference oracle for particle `i`.
fn assemble<F, D>(
    grid: TimeGrid,
    hurst: HurstParam,
    kind: &'static str,
    n: usize,
    r: usize,
    opts: BuildOptions,
    build: F,
) -> Result<BismutIntegrand>
where
    F: Fn(usize) -> (Vec<f64>, D) + Sync,
    D: Fn(usize, usize, usize) -> f64,
{
    let engine = ZetaEngine::new(grid, hurst)?;
    let a = hurst.alpha();
    let per: Vec<Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (q, diff) = build(i);
            let z = engine.expansion(&q, r, diff);
            let zg = engine.generic(&q, r)?;
            let gap: Vec<f64> = z.iter().zip(&zg).map(|(u, v)| u - v).collect();
            let num = l2_sq(&grid, a, &gap, r);
            let den = l2_sq(&grid, a, &zg, r);
            Ok((q, z, opts.keep_generic.then_some(zg), num, den))
        })
        .collect();
    let w = grid.n_nodes() * r;
    let mut q = Vec::with_capacity(n * w);
    let mut zeta = Vec::with_capacity(n * w);
    let mut gen = opts.keep_generic.then(|| Vec::with_capacity(n * w));
    let mut nums = Vec::with_capacity(n);
    let mut dens = Vec::with_capacity(n);
    for (i, item) in per.into_iter().enumerate() {
        let (qi, zi, gi, num, den) = item?;
        if zi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { particle: i, step: 0 });
        }
        q.extend(qi);
        zeta.extend(zi);
        if let (Some(g), Some(gi)) = (gen.as_mut(), gi) {
            g.extend(gi);
        }
        nums.push(num);
        dens.push(den);
    }
    let den = pairwise_sum(&dens);
    let route_gap = if den > 0.0 { (pairwise_sum(&nums) / den).sqrt() } else { pairwise_sum(&nums).sqrt() };
    Ok(BismutIntegrand {
        grid,
        hurst,
        kind,
        n,
        r,
        q,
        zeta,
        zeta_generic: gen,
        route_gap,
    })
}

fn sigma_inverses(diff: &Diffusion, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let inv: Option<Vec<_>> = (0..grid.n_nodes()).map(|k| diff.sigma_inverse(grid.t(k))).collect();
    let inv = inv.ok_or(Error::MissingSigmaInverse)?;
    if inv.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::MissingSigmaInverse);
    }
    Ok(inv)
}

/// `h^φ` for a non-degenerate model, from
/// `(R_H h^φ)' = σ^{-1}(s) [(1/T) Γ_s + (s/T) L_s]` with `L` the mean-field
/// term of the variation equation.
///
/// On the grid the bracket on cell `k` is `Γ_{k+1}/T + (t_k/T) L_k`, which
/// makes the discrete Malliavin flow equal to `(t_k/T) Γ_k` at every node,
/// in particular `Γ_T` at the horizon.
pub fn build_h_nondegenerate(
    ens: &ParticleEnsemble,
    var: &VariationEnsemble,
    diff: &Diffusion,
    hurst: HurstParam,
    opts: BuildOptions,
) -> Result<BismutIntegrand> {
    let grid = *ens.grid();
    grid.ensure_same(var.grid())?;
    let (n, d) = (ens.len(), ens.dim());
    if var.len() != n || var.dim() != d {
        return Err(Error::GridMismatch("variation does not match the ensemble".into()));
    }
    if diff.noise_dim() != d || diff.dim() != d {
        return Err(invalid("diffusion", "the non-degenerate weight needs a square σ"));
    }
    let inv = sigma_inverses(diff, &grid)?;
    let big_t = grid.horizon();
    let steps = grid.n_steps();
    // Factors on node j (j < n; node n repeats n-1).
    let gplus = |j: usize, i: usize| var.gamma(j.min(steps - 1) + 1, i);
    let lk = |j: usize, i: usize| var.lions_term(j.min(steps - 1), i);
    let tj = |j: usize| grid.t(j.min(steps - 1));
    assemble(grid, hurst, "nondegenerate", n, d, opts, |i| {
        let rho: Vec<DVector<f64>> = (0..=steps)
            .map(|j| {
                let (g, l) = (gplus(j, i), lk(j, i));
                DVector::from_iterator(d, (0..d).map(|c| g[c] / big_t + tj(j) / big_t * l[c]))
            })
            .collect();
        let sinv = |j: usize| &inv[j.min(steps - 1)];
        let mut q = vec![0.0; (steps + 1) * d];
        for j in 0..=steps {
            let v = sinv(j) * &rho[j];
            q[j * d..(j + 1) * d].copy_from_slice(v.as_slice());
        }
        let diff = move |k: usize, j: usize, c: usize| -> f64 {
            // (σ^{-1}_k - σ^{-1}_j) ρ_k + σ^{-1}_j [ΔΓ/T + (t_k - t_j)/T L_k + t_j/T ΔL]
            let (gk, gj) = (gplus(k, i), gplus(j, i));
            let (lkv, ljv) = (lk(k, i), lk(j, i));
            let (tk, tjv) = (tj(k), tj(j));
            let sk = sinv(k);
            let sj = sinv(j);
            let mut acc = 0.0;
            for e in 0..d {
                let inner = (gk[e] - gj[e]) / big_t + (tk - tjv) / big_t * lkv[e] + tjv / big_t * (lkv[e] - ljv[e]);
                acc += (sk[(c, e)] - sj[(c, e)]) * rho[k][e] + sj[(c, e)] * inner;
            }
            acc
        };
        (q, diff)
    })
}

/// Diagnostics of the degenerate construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateDiagnostics {
    pub kalman_singular_values: Vec<f64>,
    pub gramian: DMatrix<f64>,
    pub gramian_min_eigenvalue: f64,
    pub gramian_condition: f64,
    /// `max_i |g_i(T)|`
    pub g_terminal_max: f64,
}

/// The deterministic linear maps `φ ↦ g(t_k)` and `φ ↦ (g^{(2)})'(t_k)`.
#[derive(Debug, Clone)]
pub struct SteeringMaps {
    /// `d × d` per node.
    pub g: Vec<DMatrix<f64>>,
    /// `l × d` per node.
    pub g2_prime: Vec<DMatrix<f64>>,
    pub gramian: DMatrix<f64>,
    pub kalman_singular_values: Vec<f64>,
    /// Grid version: `g^{(1)}` follows the Euler recursion of the scheme and
    /// `v` solves the matching discrete Gramian, so `g(T) = 0` on the grid.
    pub g_grid: Vec<DMatrix<f64>>,
    /// `(g^{(2)}(t_{k+1}) - g^{(2)}(t_k)) / Δ` for the grid version.
    pub g2_step: Vec<DMatrix<f64>>,
    pub grid_gramian: DMatrix<f64>,
}

/// Kalman rank check: singular values of `[B, AB, ..., A^{m-1}B]`, rank
/// counted at relative threshold `1e-8`.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let m = a.nrows();
    let l = b.ncols();
    let mut k = DMatrix::zeros(m, m * l);
    let mut blk = b.clone();
    for p in 0..m {
        k.view_mut((0, p * l), (m, l)).copy_from(&blk);
        blk = a * blk;
    }
    let sv: Vec<f64> = k.singular_values().iter().copied().collect();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > 1e-8 * top).count();
    (rank, sv)
}

const PANEL_NODES: usize = 12;

/// Builds `g = (g^{(1)}, g^{(2)})` for `s_0 = 0`:
///
/// - `g^{(2)}(t) = ((T-t)/T) φ_2 - (t(T-t)/T²) B* e^{(T-t)A*} v`,
/// - `g^{(1)}(t) = e^{tA} φ_1 + ∫_0^t e^{(t-s)A} B g^{(2)}(s) ds`,
///
/// with `v = U_T^{-1} [e^{TA} φ_1 + ∫_0^T ((T-s)/T) e^{(T-s)A} B ds φ_2]` and
/// `U_T = ∫_0^T (s(T-s)/T²) e^{(T-s)A} BB* e^{(T-s)A*} ds`. `g(T) = 0` by
/// construction. `(g^{(2)})'` is the exact derivative of the formula.
pub fn steering_maps(grid: &TimeGrid, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SteeringMaps> {
    let m = a.nrows();
    let l = b.ncols();
    let d = m + l;
    if a.ncols() != m || b.nrows() != m {
        return Err(invalid("A, B", "A must be m×m and B m×l"));
    }
    let (rank, sv) = kalman_rank(a, b);
    if rank < m {
        return Err(Error::KalmanRank { rank, required: m });
    }
    let big_t = grid.horizon();
    let gl = GaussLegendre::new(PANEL_NODES);
    let e = |s: f64| (a * s).exp();
    let panels = grid.n_steps().max(32);
    let ph = big_t / panels as f64;
    let mut u = DMatrix::zeros(m, m);
    let mut w = DMatrix::zeros(m, l);
    for p in 0..panels {
        let lo = p as f64 * ph;
        for (x, wt) in gl.iter() {
            let s = lo + ph * x;
            let wq = ph * wt;
            let eb = e(big_t - s) * b;
            u += (&eb * eb.transpose()) * (wq * s * (big_t - s) / (big_t * big_t));
            w += &eb * (wq * (big_t - s) / big_t);
        }
    }
    let eig = u.clone().symmetric_eigenvalues();
    let (lo_e, hi_e) = (eig.min(), eig.max());
    let condition = if lo_e > 0.0 { hi_e / lo_e } else { f64::INFINITY };
    if !(condition <= 1e12) {
        return Err(Error::IllConditionedGramian { condition });
    }
    let uinv = u.clone().try_inverse().ok_or(Error::IllConditionedGramian { condition })?;
    // v = V φ with V = U^{-1} [e^{TA} | W].
    let mut rhs = DMatrix::zeros(m, d);
    rhs.view_mut((0, 0), (m, m)).copy_from(&e(big_t));
    rhs.view_mut((0, m), (m, l)).copy_from(&w);
    let v = uinv * rhs;
    let mut sel2 = DMatrix::zeros(l, d);
    sel2.view_mut((0, m), (l, l)).fill_with_identity();
    let bt = b.transpose();
    let g2 = |t: f64| -> DMatrix<f64> {
        let et = e(big_t - t).transpose();
        &sel2 * ((big_t - t) / big_t) - (&bt * et * &v) * (t * (big_t - t) / (big_t * big_t))
    };
    let g2p = |t: f64| -> DMatrix<f64> {
        let et = e(big_t - t).transpose();
        let tt = big_t * big_t;
        -(&sel2 / big_t) - (&bt * &et * &v) * ((big_t - 2.0 * t) / tt)
            + (&bt * a.transpose() * et * &v) * (t * (big_t - t) / tt)
    };
    let mut g1 = DMatrix::zeros(m, d);
    g1.view_mut((0, 0), (m, m)).fill_with_identity();
    let dt = grid.dt();
    let step = e(dt);
    let mut gs = Vec::with_capacity(grid.n_nodes());
    let mut gps = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let t = grid.t(k);
        let mut full = DMatrix::zeros(d, d);
        full.view_mut((0, 0), (m, d)).copy_from(&g1);
        full.view_mut((m, 0), (l, d)).copy_from(&g2(t));
        gs.push(full);
        gps.push(g2p(t));
        if k < grid.n_steps() {
            let mut next = &step * &g1;
            let t1 = grid.t(k + 1);
            for (x, wt) in gl.iter() {
                let s = t + dt * x;
                next += (e(t1 - s) * b * g2(s)) * (dt * wt);
            }
            g1 = next;
        }
    }
    // Grid version. With P = I + AΔ, the scheme gives
    // g1_N = P^N φ1 + Σ_k P^{N-1-k} B g2(t_k) Δ; both sums are accumulated
    // forward as R_{k+1} = P R_k + (..)_k.
    let steps = grid.n_steps();
    let p = DMatrix::identity(m, m) + a * dt;
    let c = |t: f64| &bt * e(big_t - t).transpose();
    let wgt = |t: f64| t * (big_t - t) / (big_t * big_t);
    let mut r = DMatrix::zeros(m, d);
    r.view_mut((0, 0), (m, m)).fill_with_identity();
    let mut ud = DMatrix::zeros(m, m);
    for k in 0..steps {
        let t = grid.t(k);
        r = &p * r + (b * &sel2) * ((big_t - t) / big_t * dt);
        ud = &p * ud + (b * c(t)) * (wgt(t) * dt);
    }
    let eig_d = ud.clone().symmetric_eigenvalues();
    let ud_cond = if eig_d.min() > 0.0 { eig_d.max() / eig_d.min() } else { f64::INFINITY };
    let vd = ud
        .clone()
        .lu()
        .solve(&r)
        .filter(|_| ud_cond <= 1e12)
        .ok_or(Error::IllConditionedGramian { condition: ud_cond })?;
    let g2d: Vec<DMatrix<f64>> = (0..=steps)
        .map(|k| {
            let t = grid.t(k);
            &sel2 * ((big_t - t) / big_t) - (c(t) * &vd) * wgt(t)
        })
        .collect();
    let mut g1d = DMatrix::zeros(m, d);
    g1d.view_mut((0, 0), (m, m)).fill_with_identity();
    let mut g_grid = Vec::with_capacity(steps + 1);
    for (k, g2k) in g2d.iter().enumerate() {
        let mut full = DMatrix::zeros(d, d);
        full.view_mut((0, 0), (m, d)).copy_from(&g1d);
        full.view_mut((m, 0), (l, d)).copy_from(g2k);
        g_grid.push(full);
        if k < steps {
            g1d = &p * &g1d + (b * g2k) * dt;
        }
    }
    let mut g2_step: Vec<DMatrix<f64>> = g2d.windows(2).map(|w| (&w[1] - &w[0]) / dt).collect();
    g2_step.push(g2_step[steps - 1].clone());
    Ok(SteeringMaps {
        g: gs,
        g2_prime: gps,
        gramian: u,
        kalman_singular_values: sv,
        g_grid,
        g2_step,
        grid_gramian: ud,
    })
}

/// `h^φ` for the kinetic model
/// `dX1 = (A X1 + B X2) dt`, `dX2 = b2(t, X, L_X) dt + σ(t) dB^H`:
/// `(R_H h^φ)' = σ^{-1} [∇_g b2 + L2 - (g^{(2)})']`, where `L2` is the
/// mean-field term of the variation equation restricted to the noisy block.
///
/// Uses the grid version of `g` (see [`SteeringMaps::g_grid`]) with the
/// forward difference of `g^{(2)}` in place of its derivative, which makes
/// the discrete Malliavin flow reach `Γ_T` exactly.
pub fn build_h_degenerate(
    kind: &ModelKind,
    ens: &ParticleEnsemble,
    var: &VariationEnsemble,
    drift: &dyn Drift,
    diff: &Diffusion,
    hurst: HurstParam,
    opts: BuildOptions,
) -> Result<(BismutIntegrand, DegenerateDiagnostics)> {
    let ModelKind::Degenerate { a, b } = kind else {
        return Err(invalid("model", "build_h_degenerate needs a degenerate model"));
    };
    let grid = *ens.grid();
    grid.ensure_same(var.grid())?;
    let (n, d) = (ens.len(), ens.dim());
    let (m, l) = (a.nrows(), b.ncols());
    if d != m + l || diff.noise_dim() != l || var.len() != n {
        return Err(invalid("model", "dimensions of A, B, σ and the ensemble disagree"));
    }
    let maps = steering_maps(&grid, a, b)?;
    let inv = sigma_inverses(diff, &grid)?;
    let steps = grid.n_steps();
    let phi0: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_column_slice(var.gamma(0, i))).collect();
    let g_terminal_max = phi0
        .iter()
        .map(|p| (&maps.g_grid[steps] * p).amax())
        .fold(0.0, f64::max);
    // ρ_j = ∇b2(X_j) g_j + L2_j - (g2_{j+1} - g2_j)/Δ, j < n; node n repeats n-1.
    let rho_at = |i: usize, j: usize| -> DVector<f64> {
        let j = j.min(steps - 1);
        let t = grid.t(j);
        let x = ens.state(j, i);
        let mut gx = vec![0.0; d * d];
        drift.grad_x(t, x, ens.feature_means(j), &mut gx);
        let g = &maps.g_grid[j] * &phi0[i];
        let lt = var.lions_term(j, i);
        let gp = &maps.g2_step[j] * &phi0[i];
        DVector::from_iterator(
            l,
            (0..l).map(|r| {
                let row = m + r;
                (0..d).map(|c| gx[row * d + c] * g[c]).sum::<f64>() + lt[row] - gp[r]
            }),
        )
    };
    let integrand = assemble(grid, hurst, "degenerate", n, l, opts, |i| {
        let rho: Vec<DVector<f64>> = (0..=steps).map(|j| rho_at(i, j)).collect();
        let sinv = |j: usize| &inv[j.min(steps - 1)];
        let mut q = vec![0.0; (steps + 1) * l];
        for j in 0..=steps {
            let v = sinv(j) * &rho[j];
            q[j * l..(j + 1) * l].copy_from_slice(v.as_slice());
        }
        let diff = move |k: usize, j: usize, c: usize| -> f64 {
            let (sk, sj) = (sinv(k), sinv(j));
            (0..l)
                .map(|e| (sk[(c, e)] - sj[(c, e)]) * rho[k][e] + sj[(c, e)] * (rho[k][e] - rho[j][e]))
                .sum()
        };
        (q, diff)
    })?;
    let eig = maps.gramian.clone().symmetric_eigenvalues();
    Ok((
        integrand,
        DegenerateDiagnostics {
            kalman_singular_values: maps.kalman_singular_values,
            gramian_min_eigenvalue: eig.min(),
            gramian_condition: eig.max() / eig.min(),
            gramian: maps.gramian,
            g_terminal_max,
        },
    ))
}

/// `δ(h^φ) = ∫_0^T <ζ(t), dW_t>` per particle.
///
/// With `ζ = t^{-a} g(t)` and `g` frozen at the left node of each cell, the
/// cell integral is `g_k ∫_cell s^{-a} dW`: on the first cell this is the
/// stored mode `∫_0^Δ s^{-a} dW`, elsewhere the cell average of `s^{-a}`
/// times `ΔW_k`.
pub fn skorokhod_delta(bi: &BismutIntegrand, paths: &PathBatch) -> Result<Vec<f64>> {
    skorokhod_delta_route(bi, paths, ZetaRoute::Expansion)
}

pub fn skorokhod_delta_route(bi: &BismutIntegrand, paths: &PathBatch, route: ZetaRoute) -> Result<Vec<f64>> {
    bi.grid.ensure_same(paths.grid())?;
    if paths.len() != bi.n || paths.dim() != bi.r {
        return Err(Error::GridMismatch(format!(
            "integrand has {} particles of dimension {}, batch has {} of dimension {}",
            bi.n,
            bi.r,
            paths.len(),
            paths.dim()
        )));
    }
    let w = adapted_weights(&bi.grid, bi.hurst);
    let r = bi.r;
    let source = match route {
        ZetaRoute::Expansion => &bi.zeta,
        ZetaRoute::Generic => bi
            .zeta_generic
            .as_ref()
            .ok_or_else(|| invalid("route", "generic ζ was not kept"))?,
    };
    Ok((0..bi.n)
        .into_par_iter()
        .map(|i| {
            let z = bi.slice(source, i);
            let p = paths.path(i);
            let mut acc: f64 = (0..r).map(|c| z[c] * p.singular_mode()[c]).sum();
            for k in 1..bi.grid.n_steps() {
                let (w0, w1) = (p.w(k), p.w(k + 1));
                for c in 0..r {
                    acc += z[k * r + c] * w[k] * (w1[c] - w0[c]);
                }
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{generate_batch, VolterraWeights};
    use crate::model::{Interaction, MeanFieldDrift, ZeroDrift};
    use approx::assert_relative_eq;

    fn hp(h: f64) -> HurstParam {
        HurstParam::new(h).unwrap()
    }

    fn setup(n_paths: usize, steps: usize, dim: usize, h: f64) -> PathBatch {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        generate_batch(&VolterraWeights::new(grid, hp(h)).unwrap(), dim, n_paths, 5).unwrap()
    }

    #[test]
    fn degenerate_goldens() {
        // A = 0, B = 1, T = 1, φ = (1, 1): U = 1/6, v = 9,
        // g2(t) = 1 - t - 9 t(1-t), g2' = -1 - 9(1 - 2t), g1 = 1 + ∫ g2.
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let maps = steering_maps(&grid, &DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(maps.gramian[(0, 0)], 1.0 / 6.0, max_relative = 1e-13);
        let phi = DVector::from_vec(vec![1.0, 1.0]);
        let g = &maps.g[32] * &phi;
        assert_relative_eq!(g[1], -1.75, max_relative = 1e-13);
        assert_relative_eq!(g[0], 0.625, max_relative = 1e-13);
        assert_relative_eq!((&maps.g2_prime[32] * &phi)[0], -1.0, max_relative = 1e-13);
        let gt = &maps.g[64] * &phi;
        assert!(gt.amax() < 1e-10, "{gt}");
        let g0 = &maps.g[0] * &phi;
        assert_eq!((g0[0], g0[1]), (1.0, 1.0));
        // The grid version is exact at T and within O(Δ) of the formula.
        assert!((&maps.g_grid[64] * &phi).amax() < 1e-12);
        let gg = &maps.g_grid[32] * &phi;
        assert!((gg[0] - 0.625).abs() < 0.1 && (gg[1] + 1.75).abs() < 0.1, "{gg}");
        assert!((maps.grid_gramian[(0, 0)] - 1.0 / 6.0).abs() < 0.01);
    }

    #[test]
    fn kalman_failure_is_reported() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(
            steering_maps(&grid, &a, &b).unwrap_err(),
            Error::KalmanRank { rank: 1, required: 2 }
        );
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        steering_maps(&grid, &a, &b).unwrap();
    }

    #[test]
    fn variation_of_linear_drift_is_exponential() {
        let noise = setup(10, 128, 1, 0.7);
        let drift = MeanFieldDrift { dim: 1, a: 0.5, beta: 0.0, interaction: Interaction::Mean };
        let init: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ens = solve_euler(&drift, &Diffusion::scalar(1, 1.0), &init, &noise).unwrap();
        let phi = Direction::new("x+1", |x, o| o[0] = x[0] + 1.0);
        let var = variation_flow(&ens, &drift, &phi).unwrap();
        for i in 0..10 {
            let exact = (init[i] + 1.0) * 0.5f64.exp();
            assert!((var.gamma(128, i)[0] - exact).abs() < exact * 0.5 * 0.25 / 128.0 * 1.1);
        }
        let var0 = variation_flow(&ens, &ZeroDrift { dim: 1 }, &phi).unwrap();
        assert_eq!(var0.gamma(128, 3)[0], 4.0);
    }

    #[test]
    fn pure_noise_zeta_matches_power_rule() {
        let noise = setup(4, 64, 1, 0.7);
        let ens = solve_euler(&ZeroDrift { dim: 1 }, &Diffusion::scalar(1, 1.0), &[0.0; 4], &noise).unwrap();
        let big_t = 1.0;
        let v = 1.7;
        let var = variation_flow(&ens, &ZeroDrift { dim: 1 }, &Direction::constant(vec![v])).unwrap();
        let bi = build_h_nondegenerate(&ens, &var, &Diffusion::scalar(1, 1.0), hp(0.7), BuildOptions::default()).unwrap();
        let c = power_rule_constant(hp(0.7));
        for k in 1..=64 {
            let t = ens.grid().t(k);
            assert_relative_eq!(bi.zeta(2).value(k, 0), v / big_t * c * t.powf(-0.2), max_relative = 1e-12);
        }
        assert!(bi.route_discrepancy() < 1e-12);
    }
}
