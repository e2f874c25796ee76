//! Interacting-particle schemes for
//! `dX = b(t, X, L_X) dt + σ(t) dB^H`.
//!
//! The law at each node is the empirical measure of the ensemble itself.
//! Every step reads a frozen snapshot of the feature means, so particle
//! updates are independent and the result does not depend on how particles
//! are spread over workers.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fbm::PathBatch;
use crate::grid::TimeGrid;
use crate::measure::EmpiricalMeasure;
use crate::model::{Diffusion, Drift};
use crate::stats::pairwise_sum;

/// `N` particle trajectories on a grid, node-major:
/// `x[k][i][c]` lives at `(k * N + i) * d + c`.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    n_particles: usize,
    dim: usize,
    x: Vec<f64>,
    // Feature means per node, `p` values each.
    features: Vec<f64>,
    n_features: usize,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.n_particles
    }

    pub fn is_empty(&self) -> bool {
        self.n_particles == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// State of particle `i` at node `k`.
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.n_particles + i) * self.dim;
        &self.x[o..o + self.dim]
    }

    /// All particles at node `k`, row-major.
    pub fn column(&self, k: usize) -> &[f64] {
        let w = self.n_particles * self.dim;
        &self.x[k * w..(k + 1) * w]
    }

    /// Feature means `E ψ(X_{t_k})` used by the drift at node `k`.
    pub fn feature_means(&self, k: usize) -> &[f64] {
        &self.features[k * self.n_features..(k + 1) * self.n_features]
    }

    pub fn snapshot(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim, self.column(k).to_vec()).expect("states are finite")
    }

    pub fn terminal(&self) -> EmpiricalMeasure {
        self.snapshot(self.grid.n_steps())
    }

    /// `(1/N) Σ_i max_k |X_i(t_k) - Y_i(t_k)|^p` over grid nodes.
    pub fn mean_sup_distance(&self, other: &ParticleEnsemble, p: f64) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        if self.n_particles != other.n_particles || self.dim != other.dim {
            return Err(Error::GridMismatch("ensembles differ in size".into()));
        }
        let per: Vec<f64> = (0..self.n_particles)
            .into_par_iter()
            .map(|i| {
                (0..self.grid.n_nodes())
                    .map(|k| {
                        let (a, b) = (self.state(k, i), other.state(k, i));
                        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt().powf(p)
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        Ok(pairwise_sum(&per) / self.n_particles as f64)
    }

    /// Snapshot CSV with columns `particle_id, x_1..x_d`.
    pub fn write_snapshot_csv<W: Write>(&self, k: usize, mut out: W) -> io::Result<()> {
        write!(out, "particle_id")?;
        for c in 0..self.dim {
            write!(out, ",x_{}", c + 1)?;
        }
        writeln!(out)?;
        for i in 0..self.n_particles {
            write!(out, "{i}")?;
            for v in self.state(k, i) {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Feature means of `N` states (row-major), summed pairwise in index order.
pub(crate) fn ensemble_features(drift: &dyn Drift, states: &[f64], d: usize) -> Vec<f64> {
    let p = drift.n_features();
    if p == 0 {
        return Vec::new();
    }
    let n = states.len() / d;
    let per: Vec<f64> = states
        .par_chunks_exact(d)
        .flat_map_iter(|x| {
            let mut f = vec![0.0; p];
            drift.features(x, &mut f);
            f
        })
        .collect();
    (0..p)
        .map(|q| {
            let col: Vec<f64> = (0..n).map(|i| per[i * p + q]).collect();
            pairwise_sum(&col) / n as f64
        })
        .collect()
}

fn check_inputs(drift: &dyn Drift, diff: &Diffusion, init: &[f64], noise: &PathBatch) -> Result<(usize, usize)> {
    let d = drift.dim();
    if diff.dim() != d {
        return Err(invalid("diffusion", format!("dimension {} but drift has {d}", diff.dim())));
    }
    if noise.dim() != diff.noise_dim() {
        return Err(invalid(
            "noise",
            format!("paths have {} components, σ needs {}", noise.dim(), diff.noise_dim()),
        ));
    }
    if init.len() != noise.len() * d {
        return Err(invalid(
            "init",
            format!("{} values for {} particles of dimension {d}", init.len(), noise.len()),
        ));
    }
    if noise.is_empty() {
        return Err(invalid("noise", "need at least one path"));
    }
    Ok((noise.len(), d))
}

/// `σ(t_k)(B^H(t_{k+1}) - B^H(t_k))` for every particle and step, node-major.
fn noise_increments(diff: &Diffusion, noise: &PathBatch) -> Vec<f64> {
    let grid = *noise.grid();
    let (n, d, r) = (noise.len(), diff.dim(), diff.noise_dim());
    let rows = diff.noisy_rows().to_vec();
    let sig: Vec<_> = (0..grid.n_steps()).map(|k| diff.sigma(grid.t(k))).collect();
    let mut out = vec![0.0; grid.n_steps() * n * d];
    out.par_chunks_mut(n * d).enumerate().for_each(|(k, col)| {
        let s = &sig[k];
        for (i, xi) in col.chunks_exact_mut(d).enumerate() {
            let p = noise.path(i);
            let (b0, b1) = (p.bh(k), p.bh(k + 1));
            for (ri, &row) in rows.iter().enumerate() {
                xi[row] = (0..r).map(|c| s[(ri, c)] * (b1[c] - b0[c])).sum();
            }
        }
    });
    out
}

fn first_nonfinite(col: &[f64], d: usize) -> Option<usize> {
    col.iter().position(|v| !v.is_finite()).map(|p| p / d)
}

/// Explicit Euler with left-point drift and noise:
/// `X_{k+1} = X_k + b(t_k, X_k, μ̂_k) Δ + σ(t_k) ΔB^H_k`.
pub fn solve_euler(drift: &dyn Drift, diff: &Diffusion, init: &[f64], noise: &PathBatch) -> Result<ParticleEnsemble> {
    let (n, d) = check_inputs(drift, diff, init, noise)?;
    let grid = *noise.grid();
    let steps = grid.n_steps();
    let dt = grid.dt();
    let p = drift.n_features();
    let dn = noise_increments(diff, noise);
    let mut x = vec![0.0; (steps + 1) * n * d];
    x[..n * d].copy_from_slice(init);
    if let Some(i) = first_nonfinite(init, d) {
        return Err(Error::NonFiniteState { particle: i, step: 0 });
    }
    let mut features = Vec::with_capacity((steps + 1) * p);
    for k in 0..steps {
        let t = grid.t(k);
        let (done, rest) = x.split_at_mut((k + 1) * n * d);
        let cur = &done[k * n * d..];
        let m = ensemble_features(drift, cur, d);
        let next = &mut rest[..n * d];
        let inc = &dn[k * n * d..(k + 1) * n * d];
        next.par_chunks_mut(d).enumerate().for_each(|(i, xi)| {
            let xc = &cur[i * d..(i + 1) * d];
            drift.eval(t, xc, &m, xi);
            for c in 0..d {
                xi[c] = xc[c] + xi[c] * dt + inc[i * d + c];
            }
        });
        if let Some(i) = first_nonfinite(next, d) {
            return Err(Error::NonFiniteState { particle: i, step: k + 1 });
        }
        features.extend_from_slice(&m);
    }
    let last = ensemble_features(drift, &x[steps * n * d..], d);
    features.extend_from_slice(&last);
    Ok(ParticleEnsemble {
        grid,
        n_particles: n,
        dim: d,
        x,
        features,
        n_features: p,
    })
}

/// Picard iteration on the same noise: `X^0 ≡ ξ` and
/// `X^{n+1}_{t_k} = ξ + Σ_{j<k} b(t_j, X^n_{t_j}, μ̂^n_j) Δ + Σ_{j<k} σ(t_j) ΔB^H_j`.
///
/// Returns the last iterate and `e_n = (1/N) Σ_i max_k |X^n - X^{n-1}|²`
/// for `n = 1..=n_iter`. The fixed point is the Euler solution.
pub fn solve_picard(
    drift: &dyn Drift,
    diff: &Diffusion,
    init: &[f64],
    noise: &PathBatch,
    n_iter: usize,
) -> Result<(ParticleEnsemble, Vec<f64>)> {
    let (n, d) = check_inputs(drift, diff, init, noise)?;
    if n_iter == 0 {
        return Err(invalid("n_iter", "need at least one iteration"));
    }
    let grid = *noise.grid();
    let steps = grid.n_steps();
    let dt = grid.dt();
    let p = drift.n_features();
    let dn = noise_increments(diff, noise);
    let mut cur = ParticleEnsemble {
        grid,
        n_particles: n,
        dim: d,
        x: init.repeat(steps + 1),
        features: Vec::new(),
        n_features: p,
    };
    cur.features = (0..=steps)
        .flat_map(|k| ensemble_features(drift, cur.column(k), d))
        .collect();
    let mut errors = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let mut x = vec![0.0; (steps + 1) * n * d];
        x[..n * d].copy_from_slice(init);
        for k in 0..steps {
            let t = grid.t(k);
            let m = cur.feature_means(k).to_vec();
            let prev = cur.column(k);
            let (done, rest) = x.split_at_mut((k + 1) * n * d);
            let base = &done[k * n * d..];
            let inc = &dn[k * n * d..(k + 1) * n * d];
            rest[..n * d].par_chunks_mut(d).enumerate().for_each(|(i, xi)| {
                drift.eval(t, &prev[i * d..(i + 1) * d], &m, xi);
                for c in 0..d {
                    xi[c] = base[i * d + c] + xi[c] * dt + inc[i * d + c];
                }
            });
            if let Some(i) = first_nonfinite(&rest[..n * d], d) {
                return Err(Error::NonFiniteState { particle: i, step: k + 1 });
            }
        }
        let features = (0..=steps)
            .flat_map(|k| ensemble_features(drift, &x[k * n * d..(k + 1) * n * d], d))
            .collect();
        let next = ParticleEnsemble {
            grid,
            n_particles: n,
            dim: d,
            x,
            features,
            n_features: p,
        };
        errors.push(next.mean_sup_distance(&cur, 2.0)?);
        cur = next;
    }
    Ok((cur, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{generate_batch, VolterraWeights};
    use crate::grid::HurstParam;
    use crate::model::{ConstantDrift, Interaction, MeanFieldDrift, ZeroDrift};
    use approx::assert_relative_eq;

    fn batch(n_paths: usize, steps: usize, dim: usize) -> PathBatch {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let w = VolterraWeights::new(grid, HurstParam::new(0.7).unwrap()).unwrap();
        generate_batch(&w, dim, n_paths, 9).unwrap()
    }

    #[test]
    fn pure_noise_adds_the_fbm_path() {
        let noise = batch(20, 32, 2);
        let init: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let ens = solve_euler(&ZeroDrift { dim: 2 }, &Diffusion::scalar(2, 1.0), &init, &noise).unwrap();
        for i in 0..20 {
            for k in 0..=32 {
                for c in 0..2 {
                    let want = init[i * 2 + c] + noise.path(i).bh(k)[c];
                    assert_relative_eq!(ens.state(k, i)[c], want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_drift_without_noise() {
        let noise = batch(5, 16, 1);
        let ens = solve_euler(&ConstantDrift { c: vec![0.7] }, &Diffusion::scalar(1, 0.0), &[1.0; 5], &noise).unwrap();
        for k in 0..=16 {
            assert_relative_eq!(ens.state(k, 3)[0], 1.0 + 0.7 * noise.grid().t(k), epsilon = 1e-13);
        }
    }

    #[test]
    fn linear_mean_field_mean_is_exponential() {
        // Without noise the ensemble mean obeys m_{k+1} = (1 + (a+β)Δ) m_k.
        let (a, beta) = (-0.3, 0.8);
        let drift = MeanFieldDrift { dim: 1, a, beta, interaction: Interaction::Mean };
        for steps in [64, 128] {
            let noise = batch(50, steps, 1);
            let init: Vec<f64> = (0..50).map(|i| 0.5 + 0.01 * i as f64).collect();
            let ens = solve_euler(&drift, &Diffusion::scalar(1, 0.0), &init, &noise).unwrap();
            let m0 = init.iter().sum::<f64>() / 50.0;
            let mt = ens.terminal().mean()[0];
            let exact = m0 * (a + beta).exp();
            assert!((mt - exact).abs() < 0.5 * m0 * (a + beta).powi(2) / steps as f64 * 2.0);
        }
    }

    #[test]
    fn non_finite_states_are_reported() {
        let noise = batch(3, 16, 1);
        let drift = MeanFieldDrift { dim: 1, a: 1e300, beta: 0.0, interaction: Interaction::Mean };
        let err = solve_euler(&drift, &Diffusion::scalar(1, 0.0), &[0.0, 2.0, 1.0], &noise).unwrap_err();
        assert_eq!(err, Error::NonFiniteState { particle: 1, step: 2 });
    }

    #[test]
    fn picard_reaches_the_euler_solution() {
        let noise = batch(40, 64, 1);
        let drift = MeanFieldDrift { dim: 1, a: -0.3, beta: 0.3, interaction: Interaction::Mean };
        let diff = Diffusion::scalar(1, 1.0);
        let init: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let euler = solve_euler(&drift, &diff, &init, &noise).unwrap();
        let (pic, errs) = solve_picard(&drift, &diff, &init, &noise, 12).unwrap();
        assert!(pic.mean_sup_distance(&euler, 1.0).unwrap() < 10.0 * noise.grid().dt());
        assert!(errs[11] < 1e-12 * errs[0].max(1.0));
        // b ≡ 0: the first iterate is already exact.
        let (_, e0) = solve_picard(&ZeroDrift { dim: 1 }, &diff, &init, &noise, 3).unwrap();
        assert!(e0[0] > 0.0 && e0[1] == 0.0 && e0[2] == 0.0);
    }
}
