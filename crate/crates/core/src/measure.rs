//! Empirical measures: moments, Wasserstein distances and pushforwards.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Domain};
use crate::stats::pairwise_sum;

/// Largest atom count solved exactly by assignment when `d > 1`.
pub const ASSIGNMENT_MAX_ATOMS: usize = 512;
/// Projections used by the sliced estimate.
pub const SLICED_PROJECTIONS: usize = 256;

/// Equal-weight atoms in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(invalid(
                "atoms",
                format!("need a positive multiple of {dim} coordinates, got {}", atoms.len()),
            ));
        }
        if let Some(i) = atoms.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAtom(i / dim));
        }
        Ok(Self { dim, atoms })
    }

    pub fn from_scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    /// `n` copies of `x`.
    pub fn dirac(x: &[f64], n: usize) -> Result<Self> {
        Self::new(x.len(), x.repeat(n))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    /// `(1/N) Σ f(x_i)` with a deterministic summation order.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> f64 {
        let vals: Vec<f64> = self.atoms.par_chunks_exact(self.dim).map(f).collect();
        pairwise_sum(&vals) / self.len() as f64
    }

    /// Componentwise mean.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim).map(|c| self.expect(|x| x[c])).collect()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `(1/N Σ |x_i|^θ)^{1/θ}`.
pub fn moment(mu: &EmpiricalMeasure, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    Ok(mu.expect(|x| norm(x).powf(theta)).powf(1.0 / theta))
}

fn check_theta(theta: f64) -> Result<()> {
    if theta >= 1.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(invalid("theta", format!("must be at least 1, got {theta}")))
    }
}

/// A Wasserstein distance together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wasserstein {
    pub value: f64,
    /// `false` when the sliced estimate replaced the exact assignment.
    pub exact: bool,
}

/// `W_θ(μ, ν)`; see [`wasserstein_detailed`].
pub fn wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, theta: f64) -> Result<f64> {
    wasserstein_detailed(mu, nu, theta).map(|w| w.value)
}

/// `W_θ` between empirical measures.
///
/// In one dimension the sorted (quantile) coupling is optimal for every
/// `θ >= 1`, and it handles unequal atom counts directly. In higher dimension
/// unequal counts are first equalized by resampling the smaller measure; up to
/// [`ASSIGNMENT_MAX_ATOMS`] atoms the optimal assignment is solved exactly,
/// above that the sliced estimate is returned with `exact = false`.
pub fn wasserstein_detailed(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    theta: f64,
) -> Result<Wasserstein> {
    check_theta(theta)?;
    if mu.dim != nu.dim {
        return Err(invalid("nu", format!("dimension {} differs from {}", nu.dim, mu.dim)));
    }
    if mu.dim == 1 {
        return Ok(Wasserstein {
            value: quantile_cost(mu.atoms.clone(), nu.atoms.clone(), theta).powf(1.0 / theta),
            exact: true,
        });
    }
    let (mu, nu) = equalize(mu, nu);
    let n = mu.len();
    if n <= ASSIGNMENT_MAX_ATOMS {
        let cost: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let x = mu.atom(i);
                let nu = &nu;
                (0..n).map(move |j| dist(x, nu.atom(j)).powf(theta))
            })
            .collect();
        let (rows, cols) = lsap::solve(n, n, &cost, false)
            .map_err(|e| Error::Other(format!("assignment solver failed: {e:?}")))?;
        let total: Vec<f64> = rows.iter().zip(&cols).map(|(&i, &j)| cost[i * n + j]).collect();
        Ok(Wasserstein {
            value: (pairwise_sum(&total) / n as f64).powf(1.0 / theta),
            exact: true,
        })
    } else {
        Ok(Wasserstein {
            value: sliced(&mu, &nu, theta),
            exact: false,
        })
    }
}

/// `∫_0^1 |F^{-1}(u) - G^{-1}(u)|^θ du` for two samples of arbitrary sizes.
fn quantile_cost(mut a: Vec<f64>, mut b: Vec<f64>, theta: f64) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let terms: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(theta)).collect();
        return pairwise_sum(&terms) / a.len() as f64;
    }
    // Merge the two step quantile functions.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut u, mut acc) = (0, 0, 0.0f64, 0.0);
    while i < a.len() && j < b.len() {
        let next = ((i + 1) as f64 / na).min((j + 1) as f64 / nb);
        acc += (next - u) * (a[i] - b[j]).abs().powf(theta);
        u = next;
        if (i + 1) as f64 / na <= next {
            i += 1;
        }
        if (j + 1) as f64 / nb <= next {
            j += 1;
        }
    }
    acc
}

fn equalize(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (EmpiricalMeasure, EmpiricalMeasure) {
    let (n, m) = (mu.len(), nu.len());
    if n == m {
        return (mu.clone(), nu.clone());
    }
    let grow = |small: &EmpiricalMeasure, target: usize| {
        let mut rng = stream(target as u64, Domain::TestFunctions, 1, small.len() as u64);
        let mut atoms = small.atoms.clone();
        for _ in small.len()..target {
            let k = rng.random_range(0..small.len());
            atoms.extend_from_slice(small.atom(k));
        }
        EmpiricalMeasure { dim: small.dim, atoms }
    };
    if n < m {
        (grow(mu, m), nu.clone())
    } else {
        (mu.clone(), grow(nu, n))
    }
}

fn sliced(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, theta: f64) -> f64 {
    let d = mu.dim;
    let costs: Vec<f64> = (0..SLICED_PROJECTIONS as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(0, Domain::TestFunctions, p, 2);
            let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nw = norm(&w);
            w.iter_mut().for_each(|v| *v /= nw);
            let proj = |m: &EmpiricalMeasure| -> Vec<f64> {
                m.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
            };
            quantile_cost(proj(mu), proj(nu), theta)
        })
        .collect();
    (pairwise_sum(&costs) / SLICED_PROJECTIONS as f64).powf(1.0 / theta)
}

/// Atoms `x_i + ε φ(x_i)`.
pub fn pushforward_shift(
    mu: &EmpiricalMeasure,
    phi: impl Fn(&[f64]) -> Vec<f64>,
    eps: f64,
) -> Result<EmpiricalMeasure> {
    let d = mu.dim;
    let mut atoms = Vec::with_capacity(mu.atoms.len());
    for (i, x) in mu.iter().enumerate() {
        let p = phi(x);
        if p.len() != d {
            return Err(invalid("phi", format!("returned {} components, expected {d}", p.len())));
        }
        for (a, b) in x.iter().zip(&p) {
            let v = a + eps * b;
            if !v.is_finite() {
                return Err(Error::NonFiniteAtom(i));
            }
            atoms.push(v);
        }
    }
    Ok(EmpiricalMeasure { dim: d, atoms })
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A test function `f: R^d -> R` with optional declared bounds.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    f: ScalarFn,
    grad: Option<GradFn>,
    sup_bound: Option<f64>,
    lipschitz: Option<f64>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("sup_bound", &self.sup_bound)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            grad: None,
            sup_bound: None,
            lipschitz: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn with_bounds(mut self, sup: Option<f64>, lipschitz: Option<f64>) -> Self {
        self.sup_bound = sup;
        self.lipschitz = lipschitz;
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), move |_| c)
            .with_gradient(|_, g| g.iter_mut().for_each(|v| *v = 0.0))
            .with_bounds(Some(c.abs()), Some(0.0))
    }

    /// `x ↦ x_c`.
    pub fn coordinate(c: usize) -> Self {
        Self::new(format!("x{}", c + 1), move |x| x[c])
            .with_gradient(move |_, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[c] = 1.0;
            })
            .with_bounds(None, Some(1.0))
    }

    /// `x ↦ sin(x_c)`.
    pub fn sine(c: usize) -> Self {
        Self::new(format!("sin(x{})", c + 1), move |x| x[c].sin())
            .with_gradient(move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[c] = x[c].cos();
            })
            .with_bounds(Some(1.0), Some(1.0))
    }

    /// `x ↦ cos(<w, x> + b)`, bounded by 1.
    pub fn cosine_feature(w: Vec<f64>, b: f64) -> Self {
        let lip = norm(&w);
        let w2 = w.clone();
        Self::new(format!("cos(<w,x>+{b:.3})"), move |x| {
            (x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b).cos()
        })
        .with_gradient(move |x, g| {
            let s = -(x.iter().zip(&w2).map(|(a, c)| a * c).sum::<f64>() + b).sin();
            g.iter_mut().zip(&w2).for_each(|(v, c)| *v = s * c);
        })
        .with_bounds(Some(1.0), Some(lip))
    }

    /// `R tanh(f / R)`: bounded by `R`, equal to `f` to first order near 0.
    pub fn clamped(&self, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid("radius", format!("must be positive, got {radius}")));
        }
        let inner = self.f.clone();
        let grad = self.grad.clone();
        let mut out = Self::new(format!("clamp[{}; R={radius:.6}]", self.name), move |x| {
            radius * (inner(x) / radius).tanh()
        });
        if let Some(g) = grad {
            let inner = self.f.clone();
            out = out.with_gradient(move |x, out| {
                g(x, out);
                let s = 1.0 / (inner(x) / radius).cosh().powi(2);
                out.iter_mut().for_each(|v| *v *= s);
            });
        }
        let sup = self.sup_bound.map_or(radius, |s| s.min(radius));
        Ok(out.with_bounds(Some(sup), self.lipschitz))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// Gradient if one was supplied.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.grad {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    /// Spot-checks the declared bounds on the atoms of `mu` (and on midpoints
    /// of consecutive atoms for the Lipschitz constant).
    pub fn check_bounds(&self, mu: &EmpiricalMeasure) -> Result<()> {
        let slack = 1.0 + 1e-12;
        if let Some(s) = self.sup_bound {
            for (i, x) in mu.iter().enumerate() {
                if self.eval(x).abs() > s * slack {
                    return Err(invalid("f", format!("|f| exceeds declared bound {s} at atom {i}")));
                }
            }
        }
        if let Some(l) = self.lipschitz {
            for i in 1..mu.len() {
                let (x, y) = (mu.atom(i - 1), mu.atom(i));
                let dxy = dist(x, y);
                if dxy > 0.0 && (self.eval(x) - self.eval(y)).abs() > l * dxy * slack + 1e-14 {
                    return Err(invalid("f", format!("Lipschitz bound {l} violated near atom {i}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_by_hand() {
        let zero = EmpiricalMeasure::dirac(&[0.0, 0.0], 5).unwrap();
        assert_eq!(moment(&zero, 2.0).unwrap(), 0.0);
        let one = EmpiricalMeasure::new(2, vec![3.0, 4.0]).unwrap();
        assert_relative_eq!(moment(&one, 3.0).unwrap(), 5.0, max_relative = 1e-14);
        let two = EmpiricalMeasure::from_scalars(vec![0.0, 2.0]).unwrap();
        assert_relative_eq!(moment(&two, 2.0).unwrap(), 2f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert_eq!(
            EmpiricalMeasure::new(1, vec![1.0, f64::NAN]),
            Err(Error::NonFiniteAtom(1))
        );
        let m = EmpiricalMeasure::from_scalars(vec![1.0]).unwrap();
        assert!(wasserstein(&m, &m, 0.5).is_err());
        let big = EmpiricalMeasure::from_scalars(vec![1e308]).unwrap();
        assert_eq!(
            pushforward_shift(&big, |x| vec![x[0]], 10.0),
            Err(Error::NonFiniteAtom(0))
        );
    }

    #[test]
    fn dirac_transport() {
        let a = EmpiricalMeasure::dirac(&[0.0, 0.0], 7).unwrap();
        let b = EmpiricalMeasure::dirac(&[3.0, -4.0], 7).unwrap();
        for theta in [1.0, 2.0, 3.5] {
            assert_relative_eq!(wasserstein(&a, &b, theta).unwrap(), 5.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn unequal_counts_in_one_dimension() {
        // Quantile coupling of {0, 1} against {0, 0.5, 1}: the middle third
        // of u pairs 0 with 0.5 and 1 with 0.5.
        let a = EmpiricalMeasure::from_scalars(vec![0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::from_scalars(vec![0.0, 0.5, 1.0]).unwrap();
        let w1 = wasserstein(&a, &b, 1.0).unwrap();
        assert_relative_eq!(w1, (1.0 / 6.0) * 0.5 * 2.0, max_relative = 1e-12);
    }

    #[test]
    fn clamp_is_bounded_and_tangent() {
        let f = TestFunction::coordinate(0).clamped(2.0).unwrap();
        assert!(f.eval(&[100.0]).abs() <= 2.0);
        assert_relative_eq!(f.eval(&[1e-4]), 1e-4, max_relative = 1e-8);
        let mut g = [0.0];
        assert!(f.gradient(&[0.0], &mut g));
        assert_eq!(g[0], 1.0);
        let m = EmpiricalMeasure::from_scalars((0..50).map(|i| i as f64 - 25.0).collect()).unwrap();
        f.check_bounds(&m).unwrap();
        let liar = TestFunction::new("2x", |x| 2.0 * x[0]).with_bounds(None, Some(1.0));
        assert!(liar.check_bounds(&m).is_err());
    }
}
