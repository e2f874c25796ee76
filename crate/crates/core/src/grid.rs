//! Uniform time grids, the Hurst parameter, and functions sampled on a grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform partition `t_k = k T / n` of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", format!("must be positive and finite, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps", "must be at least 1"));
        }
        Ok(Self { horizon, n_steps })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_k`. The last node is exactly `T`.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.t(k)).collect()
    }

    /// Same node count on `[0, c T]`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.horizon * factor, self.n_steps)
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "expected T={} n={}, got T={} n={}",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )))
        }
    }
}

/// Hurst index restricted to the open interval `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self> {
        if h.is_finite() && h > 0.5 && h < 1.0 {
            Ok(Self(h))
        } else {
            Err(invalid("H", format!("Hurst parameter must lie in (1/2, 1), got {h}")))
        }
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }

    /// `H - 1/2`, the fractional order appearing in the kernel operators.
    #[inline]
    pub fn alpha(&self) -> f64 {
        self.0 - 0.5
    }
}

/// Values of a (possibly vector-valued) function at every node of a grid.
///
/// Storage is node-major: `values[k * dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if values.len() != grid.n_nodes() * dim {
            return Err(Error::GridMismatch(format!(
                "expected {} values ({} nodes x dim {}), got {}",
                grid.n_nodes() * dim,
                grid.n_nodes(),
                dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_nodes() * dim],
        }
    }

    /// Samples a scalar function at the nodes.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            dim: 1,
            values: (0..grid.n_nodes()).map(|k| f(grid.t(k))).collect(),
        }
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Scalar value at node `k` (first component).
    #[inline]
    pub fn value(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    /// Extracts component `c` as a scalar grid function.
    pub fn component(&self, c: usize) -> GridFunction {
        let values = (0..self.grid.n_nodes())
            .map(|k| self.values[k * self.dim + c])
            .collect();
        GridFunction {
            grid: self.grid,
            dim: 1,
            values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `max_k |f(t_k) - g(t_k)|` over nodes `k >= from`.
    pub fn sup_distance_from(&self, other: &GridFunction, from: usize) -> f64 {
        (from..self.grid.n_nodes())
            .flat_map(|k| self.at(k).iter().zip(other.at(k)).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}
