//! Fractional Brownian motion coupled to its driving Wiener process.
//!
//! `B^H_{t_k} = ∫_0^{t_k} K_H(t_k, s) dW_s` is discretized cell by cell. Each
//! cell carries a few jointly Gaussian modes of `W` and the cell integral of
//! the kernel is replaced by its `L²` projection on them:
//!
//! - cells `j >= 1`: `ΔW_j` and `D_j = ∫_cell (t_{j+1}-s)^a dW_s`, which
//!   captures the `(t-s)^a` shape of the kernel next to the diagonal;
//! - the first cell additionally carries `S_0 = ∫_0^Δ s^{-a} dW_s` for the
//!   `s^{-a}` blow-up at the origin.
//!
//! Constants lie in every cell's span, so the weight on `ΔW_j` alone is the
//! exact cell average of the kernel whenever the other modes are dropped.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use statrs::function::beta::beta;

use crate::error::{invalid, Error, Result};
use crate::frac_calc::{covariance_rh, KernelTable};
use crate::grid::{GridFunction, HurstParam, TimeGrid};
use crate::rng::{derive_seed, fill_standard_normal, stream, Domain};

/// Volterra weights for one `(grid, H)` pair, immutable once built.
#[derive(Debug, Clone)]
pub struct VolterraWeights {
    grid: TimeGrid,
    hurst: HurstParam,
    // Row k (1..=n) holds the (ΔW_j, D_j) coefficients for j = 1..k-1.
    cells: Vec<(f64, f64)>,
    // Per k: coefficients of (ΔW_0, S_0, D_0).
    first: Vec<[f64; 3]>,
    // Cholesky factors of the mode covariances.
    chol_first: Matrix3<f64>,
    chol_cell: Matrix2<f64>,
}

impl VolterraWeights {
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        Self::from_table(&KernelTable::with_diagonal_moments(grid, hurst))
    }

    pub fn from_table(table: &KernelTable) -> Result<Self> {
        let grid = *table.grid();
        let hurst = table.hurst();
        let a = hurst.alpha();
        let n = grid.n_steps();
        let dt = grid.dt();
        let w_s = dt.powf(1.0 - a) / (1.0 - a);
        let w_d = dt.powf(1.0 + a) / (1.0 + a);
        let s_s = dt.powf(1.0 - 2.0 * a) / (1.0 - 2.0 * a);
        let d_d = dt.powf(1.0 + 2.0 * a) / (1.0 + 2.0 * a);
        let s_d = dt * beta(1.0 - a, 1.0 + a);
        let gram_first = Matrix3::new(dt, w_s, w_d, w_s, s_s, s_d, w_d, s_d, d_d);
        let gram_cell = Matrix2::new(dt, w_d, w_d, d_d);
        let not_pd = |m: &DMatrix<f64>| Error::NotPositiveDefinite {
            min_eigenvalue: m.clone().symmetric_eigenvalues().min(),
        };
        let ch_first = gram_first
            .cholesky()
            .ok_or_else(|| not_pd(&DMatrix::from_column_slice(3, 3, gram_first.as_slice())))?;
        let ch_cell = gram_cell
            .cholesky()
            .ok_or_else(|| not_pd(&DMatrix::from_column_slice(2, 2, gram_cell.as_slice())))?;
        let missing = || invalid("table", "Volterra weights need diagonal kernel moments");
        let mut cells = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        let mut first = vec![[0.0; 3]; n + 1];
        for k in 1..=n {
            for j in 1..k {
                let b = Vector2::new(table.cell_integral(k, j), table.diagonal_moment(k, j).ok_or_else(missing)?);
                let c = ch_cell.solve(&b);
                cells.push((c[0], c[1]));
            }
            let b = Vector3::new(
                table.cell_integral(k, 0),
                table.singular_moment(k),
                table.diagonal_moment(k, 0).ok_or_else(missing)?,
            );
            let c = ch_first.solve(&b);
            first[k] = [c[0], c[1], c[2]];
        }
        Ok(Self {
            grid,
            hurst,
            cells,
            first,
            chol_first: ch_first.l(),
            chol_cell: ch_cell.l(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// Fills `bh` (length `n + 1`) for one component from its Wiener node
    /// values `w`, origin mode `s0` and diagonal modes `d` (length `n`).
    /// Increments are differences of `w`, so stored paths reproduce `bh` bit
    /// for bit.
    pub fn transform(&self, w: &[f64], s0: f64, d: &[f64], bh: &mut [f64]) {
        let n = self.grid.n_steps();
        bh[0] = 0.0;
        let mut row = 0;
        let dw0 = w[1] - w[0];
        for k in 1..=n {
            let [c1, c2, c3] = self.first[k];
            let mut acc = c1 * dw0 + c2 * s0 + c3 * d[0];
            let weights = &self.cells[row..row + k - 1];
            for (i, (cw, cd)) in weights.iter().enumerate() {
                let j = i + 1;
                acc += cw * (w[j + 1] - w[j]) + cd * d[j];
            }
            bh[k] = acc;
            row += k - 1;
        }
    }

    /// Draws one coupled path with `dim` independent components.
    pub fn sample(&self, dim: usize, seed: u64) -> CoupledPath {
        let n = self.grid.n_steps();
        let sd = self.grid.dt().sqrt();
        let mut w = vec![0.0; (n + 1) * dim];
        let mut bh = vec![0.0; (n + 1) * dim];
        let mut s0 = vec![0.0; dim];
        let mut diag = vec![0.0; n * dim];
        // n increments, two extra first-cell normals, n-1 diagonal residuals.
        let mut z = vec![0.0; 2 * n + 1];
        let mut wc = vec![0.0; n + 1];
        let mut dc = vec![0.0; n];
        let mut bc = vec![0.0; n + 1];
        let (lf, lc) = (&self.chol_first, &self.chol_cell);
        for c in 0..dim {
            let mut rng = stream(seed, Domain::WienerIncrements, 0, c as u64);
            fill_standard_normal(&mut rng, &mut z);
            wc[0] = 0.0;
            for k in 0..n {
                wc[k + 1] = wc[k] + sd * z[k];
            }
            let (e1, e2) = (z[n], z[n + 1]);
            let s = lf[(1, 0)] * z[0] + lf[(1, 1)] * e1;
            dc[0] = lf[(2, 0)] * z[0] + lf[(2, 1)] * e1 + lf[(2, 2)] * e2;
            for j in 1..n {
                dc[j] = lc[(1, 0)] * z[j] + lc[(1, 1)] * z[n + 1 + j];
            }
            self.transform(&wc, s, &dc, &mut bc);
            for k in 0..=n {
                w[k * dim + c] = wc[k];
                bh[k * dim + c] = bc[k];
            }
            for j in 0..n {
                diag[j * dim + c] = dc[j];
            }
            s0[c] = s;
        }
        CoupledPath {
            grid: self.grid,
            hurst: self.hurst,
            dim,
            seed,
            w,
            bh,
            s0,
            diag,
        }
    }
}

/// One fBm path with the Wiener path that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    grid: TimeGrid,
    hurst: HurstParam,
    dim: usize,
    seed: u64,
    w: Vec<f64>,
    bh: Vec<f64>,
    s0: Vec<f64>,
    diag: Vec<f64>,
}

impl CoupledPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `W(t_k)`.
    #[inline]
    pub fn w(&self, k: usize) -> &[f64] {
        &self.w[k * self.dim..(k + 1) * self.dim]
    }

    /// `B^H(t_k)`.
    #[inline]
    pub fn bh(&self, k: usize) -> &[f64] {
        &self.bh[k * self.dim..(k + 1) * self.dim]
    }

    /// `∫_0^Δ s^{-a} dW_s` per component.
    pub fn singular_mode(&self) -> &[f64] {
        &self.s0
    }

    /// `∫_{t_j}^{t_{j+1}} (t_{j+1}-s)^a dW_s` per component, node-major.
    pub fn diagonal_modes(&self) -> &[f64] {
        &self.diag
    }

    pub fn w_values(&self) -> &[f64] {
        &self.w
    }

    pub fn bh_values(&self) -> &[f64] {
        &self.bh
    }

    /// Recomputes `B^H` from the stored Wiener path.
    pub fn rederive_bh(&self, weights: &VolterraWeights) -> Result<Vec<f64>> {
        self.grid.ensure_same(weights.grid())?;
        if weights.hurst() != self.hurst {
            return Err(invalid("weights", "Hurst parameter differs from the path's"));
        }
        let n = self.grid.n_steps();
        let mut out = vec![0.0; self.bh.len()];
        let mut bc = vec![0.0; n + 1];
        for c in 0..self.dim {
            let wc: Vec<f64> = (0..=n).map(|k| self.w(k)[c]).collect();
            let dc: Vec<f64> = (0..n).map(|j| self.diag[j * self.dim + c]).collect();
            weights.transform(&wc, self.s0[c], &dc, &mut bc);
            for k in 0..=n {
                out[k * self.dim + c] = bc[k];
            }
        }
        Ok(out)
    }

    /// CSV with columns `t, W_1..W_d, BH_1..BH_d`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|c| format!("W_{c}")));
        header.extend((1..=self.dim).map(|c| format!("BH_{c}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.grid.n_nodes() {
            let mut row = vec![format!("{}", self.grid.t(k))];
            row.extend(self.w(k).iter().map(|v| format!("{v}")));
            row.extend(self.bh(k).iter().map(|v| format!("{v}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Coupled paths sharing a grid and Hurst parameter.
#[derive(Debug, Clone)]
pub struct PathBatch {
    grid: TimeGrid,
    hurst: HurstParam,
    dim: usize,
    paths: Vec<CoupledPath>,
}

impl PathBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[CoupledPath] {
        &self.paths
    }

    pub fn path(&self, i: usize) -> &CoupledPath {
        &self.paths[i]
    }
}

/// A single coupled path keyed by `seed`.
pub fn generate_coupled(grid: TimeGrid, hurst: HurstParam, dim: usize, seed: u64) -> Result<CoupledPath> {
    if dim == 0 {
        return Err(invalid("d", "must be at least 1"));
    }
    Ok(VolterraWeights::new(grid, hurst)?.sample(dim, seed))
}

/// `n_paths` coupled paths; path `i` uses seed `derive_seed(seed, i)`, so the
/// batch does not depend on how work is split across threads.
pub fn generate_batch(weights: &VolterraWeights, dim: usize, n_paths: usize, seed: u64) -> Result<PathBatch> {
    if dim == 0 {
        return Err(invalid("d", "must be at least 1"));
    }
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|i| weights.sample(dim, derive_seed(seed, i as u64)))
        .collect();
    Ok(PathBatch {
        grid: *weights.grid(),
        hurst: weights.hurst(),
        dim,
        paths,
    })
}

/// Largest grid the dense Cholesky reference generator accepts.
pub const CHOLESKY_MAX_STEPS: usize = 4096;

/// Exact-in-law fBm sampler from the factorized node covariance.
#[derive(Debug, Clone)]
pub struct CholeskyFbm {
    grid: TimeGrid,
    factor: DMatrix<f64>,
}

impl CholeskyFbm {
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        let n = grid.n_steps();
        if n > CHOLESKY_MAX_STEPS {
            return Err(invalid("n_steps", format!("Cholesky generator supports at most {CHOLESKY_MAX_STEPS} steps")));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| covariance_rh(grid.t(i + 1), grid.t(j + 1), hurst));
        match cov.clone().cholesky() {
            Some(ch) => Ok(Self {
                grid,
                factor: ch.unpack(),
            }),
            None => {
                let min_eigenvalue = cov.symmetric_eigenvalues().min();
                Err(Error::NotPositiveDefinite { min_eigenvalue })
            }
        }
    }

    pub fn sample(&self, dim: usize, seed: u64) -> GridFunction {
        let n = self.grid.n_steps();
        let mut values = vec![0.0; (n + 1) * dim];
        let mut z = vec![0.0; n];
        for c in 0..dim {
            let mut rng = stream(seed, Domain::Cholesky, 0, c as u64);
            fill_standard_normal(&mut rng, &mut z);
            let x = &self.factor * DVector::from_column_slice(&z);
            for k in 0..n {
                values[(k + 1) * dim + c] = x[k];
            }
        }
        GridFunction::new(self.grid, dim, values).expect("shape")
    }
}

/// One exact fBm path (no Wiener coupling).
pub fn generate_exact_cholesky(grid: TimeGrid, hurst: HurstParam, dim: usize, seed: u64) -> Result<GridFunction> {
    if dim == 0 {
        return Err(invalid("d", "must be at least 1"));
    }
    Ok(CholeskyFbm::new(grid, hurst)?.sample(dim, seed))
}

/// Left-point Itô sum `Σ_k <f(t_k), W(t_{k+1}) - W(t_k)>`.
pub fn wiener_integral(integrand: &GridFunction, path: &CoupledPath) -> Result<f64> {
    path.grid.ensure_same(integrand.grid())?;
    if integrand.dim() != path.dim {
        return Err(Error::GridMismatch(format!(
            "integrand has dimension {}, path has {}",
            integrand.dim(),
            path.dim
        )));
    }
    let mut acc = 0.0;
    for k in 0..path.grid.n_steps() {
        let (w0, w1) = (path.w(k), path.w(k + 1));
        for (c, f) in integrand.at(k).iter().enumerate() {
            acc += f * (w1[c] - w0[c]);
        }
    }
    Ok(acc)
}

/// `<ψ, ∫_0^Δ s^{-a} dW_s>`: the first-cell term of an integrand `≈ ψ s^{-a}`.
pub fn singular_mode_integral(psi: &[f64], path: &CoupledPath) -> Result<f64> {
    if psi.len() != path.dim {
        return Err(Error::GridMismatch(format!(
            "coefficient has dimension {}, path has {}",
            psi.len(),
            path.dim
        )));
    }
    Ok(psi.iter().zip(&path.s0).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn setup(n: usize, h: f64) -> (TimeGrid, HurstParam) {
        (TimeGrid::new(1.0, n).unwrap(), HurstParam::new(h).unwrap())
    }

    #[test]
    fn paths_start_at_zero_and_are_reproducible() {
        let (grid, h) = setup(32, 0.7);
        let a = generate_coupled(grid, h, 2, 9).unwrap();
        let b = generate_coupled(grid, h, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w(0), &[0.0, 0.0]);
        assert_eq!(a.bh(0), &[0.0, 0.0]);
        assert_ne!(a, generate_coupled(grid, h, 2, 10).unwrap());
    }

    #[test]
    fn rederived_fbm_is_bit_identical() {
        let (grid, h) = setup(64, 0.8);
        let weights = VolterraWeights::new(grid, h).unwrap();
        let p = weights.sample(3, 123);
        assert_eq!(p.rederive_bh(&weights).unwrap(), p.bh_values());
    }

    #[test]
    fn weights_reproduce_the_covariance() {
        // Exact covariance of the discrete scheme from the mode Gram matrices.
        let (grid, h) = setup(128, 0.9);
        let w = VolterraWeights::new(grid, h).unwrap();
        let gf = w.chol_first * w.chol_first.transpose();
        let gc = w.chol_cell * w.chol_cell.transpose();
        let coef = |k: usize| -> (Vector3<f64>, Vec<Vector2<f64>>) {
            let row = (k - 1) * k.saturating_sub(2) / 2;
            let f = w.first[k];
            let cells = (1..128)
                .map(|j| {
                    if j < k {
                        let (a, b) = w.cells[row + j - 1];
                        Vector2::new(a, b)
                    } else {
                        Vector2::zeros()
                    }
                })
                .collect();
            (Vector3::new(f[0], f[1], f[2]), cells)
        };
        let cov = |k: usize, l: usize| -> f64 {
            let (f1, c1) = coef(k);
            let (f2, c2) = coef(l);
            let mut v = (f1.transpose() * gf * f2)[0];
            for (a, b) in c1.iter().zip(&c2) {
                v += (a.transpose() * gc * b)[0];
            }
            v
        };
        let mut worst: f64 = 0.0;
        for k in [1, 2, 3, 8, 40, 128] {
            for l in [1, 2, 7, 64, 127, 128] {
                let exact = covariance_rh(grid.t(k), grid.t(l), h);
                worst = worst.max((cov(k, l) / exact - 1.0).abs());
            }
        }
        assert!(worst < 2e-3, "worst relative covariance error {worst}");
        // One-step increments.
        for k in [1, 10, 100] {
            let var = cov(k + 1, k + 1) - 2.0 * cov(k, k + 1) + cov(k, k);
            assert_relative_eq!(var, grid.dt().powf(1.8), max_relative = 5e-3);
        }
    }

    #[test]
    fn wiener_integral_of_constant_telescopes() {
        let (grid, h) = setup(16, 0.6);
        let p = generate_coupled(grid, h, 2, 1).unwrap();
        let e1 = GridFunction::new(grid, 2, (0..17).flat_map(|_| [1.0, 0.0]).collect()).unwrap();
        assert_relative_eq!(wiener_integral(&e1, &p).unwrap(), p.w(16)[0], epsilon = 1e-13);
        assert_eq!(wiener_integral(&GridFunction::zeros(grid, 2), &p).unwrap(), 0.0);
        assert!(wiener_integral(&GridFunction::zeros(grid, 1), &p).is_err());
    }

    #[test]
    fn single_step_cholesky_has_the_right_scale() {
        let grid = TimeGrid::new(2.0, 1).unwrap();
        let h = HurstParam::new(0.75).unwrap();
        let f = CholeskyFbm::new(grid, h).unwrap();
        assert_relative_eq!(f.factor[(0, 0)], 2f64.powf(0.75), max_relative = 1e-14);
        let p = f.sample(1, 5);
        assert_eq!(p.value(0), 0.0);
    }

    #[test]
    fn csv_has_header_and_one_row_per_node() {
        let (grid, h) = setup(4, 0.7);
        let p = generate_coupled(grid, h, 2, 3).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,W_1,W_2,BH_1,BH_2");
        assert_eq!(lines.len(), 6);
    }
}
