//! Model ingredients: drifts, diffusions, initial laws and directions.
//!
//! A drift sees the law only through feature means `m = E ψ(X)`, with
//! `ψ: R^d -> R^p`. This covers every mean-field interaction used here and
//! gives the Lions derivative in closed form:
//! `D^L b(t,x,·)(μ)(y) = ∂_m b(t,x,m) ∇ψ(y)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::measure::EmpiricalMeasure;
use crate::rng::{stream, Domain};

/// A mean-field drift `b(t, x, μ)` on `R^d` depending on `μ` through `E ψ`.
///
/// Matrices are row-major: `grad_x` is `d × d`, `grad_m` is `d × p` and
/// `feature_jacobian` is `p × d`.
pub trait Drift: Send + Sync {
    fn dim(&self) -> usize;
    fn n_features(&self) -> usize;
    fn features(&self, x: &[f64], out: &mut [f64]);
    fn feature_jacobian(&self, x: &[f64], out: &mut [f64]);
    fn eval(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]);
    fn grad_x(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]);
    fn grad_m(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]);
    /// Declared bound `K` on `‖∇b‖ + |D^L b|`.
    fn lipschitz(&self) -> f64;
    fn name(&self) -> String;

    /// `D^L b(t,x,·)(μ)(y)` as a `d × d` matrix.
    fn lions(&self, t: f64, x: &[f64], m: &[f64], y: &[f64], out: &mut [f64]) {
        let (d, p) = (self.dim(), self.n_features());
        let mut gm = vec![0.0; d * p];
        let mut jy = vec![0.0; p * d];
        self.grad_m(t, x, m, &mut gm);
        self.feature_jacobian(y, &mut jy);
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = (0..p).map(|q| gm[r * p + q] * jy[q * d + c]).sum();
            }
        }
    }
}

/// Feature means of an empirical measure.
pub fn feature_means(drift: &dyn Drift, mu: &EmpiricalMeasure) -> Vec<f64> {
    let p = drift.n_features();
    (0..p)
        .map(|q| {
            mu.expect(|x| {
                let mut f = vec![0.0; p];
                drift.features(x, &mut f);
                f[q]
            })
        })
        .collect()
}

/// Spot-checks `‖∇b‖ + |D^L b| <= K` (operator 2-norms) at the given points.
pub fn check_lipschitz(drift: &dyn Drift, t: f64, points: &EmpiricalMeasure) -> Result<()> {
    let d = drift.dim();
    let m = feature_means(drift, points);
    let mut g = vec![0.0; d * d];
    let mut l = vec![0.0; d * d];
    let op = |v: &[f64]| DMatrix::from_row_slice(d, d, v).singular_values().max();
    for x in points.iter() {
        drift.grad_x(t, x, &m, &mut g);
        for y in points.iter().take(16) {
            drift.lions(t, x, &m, y, &mut l);
            let total = op(&g) + op(&l);
            if total > drift.lipschitz() * (1.0 + 1e-12) {
                return Err(invalid(
                    "drift",
                    format!("‖∇b‖ + |D^L b| = {total} exceeds declared K = {}", drift.lipschitz()),
                ));
            }
        }
    }
    Ok(())
}

/// `b ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroDrift {
    pub dim: usize,
}

impl Drift for ZeroDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_features(&self) -> usize {
        0
    }
    fn features(&self, _: &[f64], _: &mut [f64]) {}
    fn feature_jacobian(&self, _: &[f64], _: &mut [f64]) {}
    fn eval(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_m(&self, _: f64, _: &[f64], _: &[f64], _: &mut [f64]) {}
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn name(&self) -> String {
        "zero".into()
    }
}

/// Constant drift `b ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    pub c: Vec<f64>,
}

impl Drift for ConstantDrift {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn n_features(&self) -> usize {
        0
    }
    fn features(&self, _: &[f64], _: &mut [f64]) {}
    fn feature_jacobian(&self, _: &[f64], _: &mut [f64]) {}
    fn eval(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c);
    }
    fn grad_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_m(&self, _: f64, _: &[f64], _: &[f64], _: &mut [f64]) {}
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn name(&self) -> String {
        format!("constant{:?}", self.c)
    }
}

/// Interaction feature of a [`MeanFieldDrift`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    /// `ψ(x) = x`
    Mean,
    /// `ψ(x) = sin(x)` componentwise
    Sine,
}

/// `b(t, x, μ) = a x + β E ψ(X)` componentwise, with scalars `a` and `β`.
#[derive(Debug, Clone)]
pub struct MeanFieldDrift {
    pub dim: usize,
    pub a: f64,
    pub beta: f64,
    pub interaction: Interaction,
}

impl Drift for MeanFieldDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_features(&self) -> usize {
        self.dim
    }
    fn features(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = match self.interaction {
                Interaction::Mean => *v,
                Interaction::Sine => v.sin(),
            };
        }
    }
    fn feature_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for c in 0..d {
            out[c * d + c] = match self.interaction {
                Interaction::Mean => 1.0,
                Interaction::Sine => x[c].cos(),
            };
        }
    }
    fn eval(&self, _: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        for c in 0..self.dim {
            out[c] = self.a * x[c] + self.beta * m[c];
        }
    }
    fn grad_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        diag(out, self.dim, self.a);
    }
    fn grad_m(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        diag(out, self.dim, self.beta);
    }
    fn lipschitz(&self) -> f64 {
        self.a.abs() + self.beta.abs()
    }
    fn name(&self) -> String {
        let kind = match self.interaction {
            Interaction::Mean => "mean",
            Interaction::Sine => "sin",
        };
        format!("{}x + {} E {kind}(X)", self.a, self.beta)
    }
}

fn diag(out: &mut [f64], d: usize, v: f64) {
    out.fill(0.0);
    for c in 0..d {
        out[c * d + c] = v;
    }
}

/// Kinetic drift on `R^{m+l}`: `(A x1 + B x2, b2(t, x, μ))`.
#[derive(Clone)]
pub struct KineticDrift {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Acts on the full state and returns `l` components through its first
    /// `l` output slots; its `dim()` must be `m + l`.
    pub b2: Arc<dyn Drift>,
}

impl fmt::Debug for KineticDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KineticDrift")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("b2", &self.b2.name())
            .finish()
    }
}

impl KineticDrift {
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn l(&self) -> usize {
        self.b.ncols()
    }
}

impl Drift for KineticDrift {
    fn dim(&self) -> usize {
        self.m() + self.l()
    }
    fn n_features(&self) -> usize {
        self.b2.n_features()
    }
    fn features(&self, x: &[f64], out: &mut [f64]) {
        self.b2.features(x, out)
    }
    fn feature_jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.b2.feature_jacobian(x, out)
    }
    fn eval(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let (mm, l) = (self.m(), self.l());
        for r in 0..mm {
            out[r] = (0..mm).map(|c| self.a[(r, c)] * x[c]).sum::<f64>()
                + (0..l).map(|c| self.b[(r, c)] * x[mm + c]).sum::<f64>();
        }
        let mut tmp = vec![0.0; mm + l];
        self.b2.eval(t, x, m, &mut tmp);
        out[mm..].copy_from_slice(&tmp[..l]);
    }
    fn grad_x(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let (mm, l) = (self.m(), self.l());
        let d = mm + l;
        let mut tmp = vec![0.0; d * d];
        self.b2.grad_x(t, x, m, &mut tmp);
        for r in 0..mm {
            for c in 0..mm {
                out[r * d + c] = self.a[(r, c)];
            }
            for c in 0..l {
                out[r * d + mm + c] = self.b[(r, c)];
            }
        }
        out[mm * d..].copy_from_slice(&tmp[..l * d]);
    }
    fn grad_m(&self, t: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        let (mm, l) = (self.m(), self.l());
        let p = self.n_features();
        let mut tmp = vec![0.0; (mm + l) * p];
        self.b2.grad_m(t, x, m, &mut tmp);
        out[..mm * p].fill(0.0);
        out[mm * p..].copy_from_slice(&tmp[..l * p]);
    }
    fn lipschitz(&self) -> f64 {
        self.a.norm() + self.b.norm() + self.b2.lipschitz()
    }
    fn name(&self) -> String {
        format!("kinetic[A={:?}, B={:?}; {}]", self.a.as_slice(), self.b.as_slice(), self.b2.name())
    }
}

/// `b2(t, x, μ) = a x_{m+1..} + β E X^{(1)}` for `m = l = 1` style systems:
/// the `l` outputs are `a x2 + β E x1`.
#[derive(Debug, Clone)]
pub struct KineticForcing {
    pub m: usize,
    pub l: usize,
    pub a: f64,
    pub beta: f64,
}

impl Drift for KineticForcing {
    fn dim(&self) -> usize {
        self.m + self.l
    }
    fn n_features(&self) -> usize {
        self.m
    }
    fn features(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&x[..self.m]);
    }
    fn feature_jacobian(&self, _: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for q in 0..self.m {
            out[q * d + q] = 1.0;
        }
    }
    fn eval(&self, _: f64, x: &[f64], m: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.l {
            out[r] = self.a * x[self.m + r] + self.beta * m[r % self.m];
        }
    }
    fn grad_x(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for r in 0..self.l {
            out[r * d + self.m + r] = self.a;
        }
    }
    fn grad_m(&self, _: f64, _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.l {
            out[r * self.m + r % self.m] = self.beta;
        }
    }
    fn lipschitz(&self) -> f64 {
        self.a.abs() + self.beta.abs()
    }
    fn name(&self) -> String {
        format!("{} x2 + {} E x1", self.a, self.beta)
    }
}

/// Deterministic, distribution-free diffusion `σ(t)` of shape `d × r`.
#[derive(Clone)]
pub struct Diffusion {
    dim: usize,
    noise_dim: usize,
    sigma: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
    sigma_inverse: Option<Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>>,
    /// Rows of the state that receive noise (all rows when square).
    noisy_rows: Vec<usize>,
    hoelder: Option<(f64, f64)>,
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Diffusion")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("sigma(0)", &(self.sigma)(0.0))
            .finish()
    }
}

impl Diffusion {
    /// `σ(t) = c I_d`.
    pub fn scalar(dim: usize, c: f64) -> Self {
        let inv = if c != 0.0 {
            Some(Arc::new(move |_t: f64| DMatrix::identity(dim, dim) / c) as _)
        } else {
            None
        };
        Self {
            dim,
            noise_dim: dim,
            sigma: Arc::new(move |_| DMatrix::identity(dim, dim) * c),
            sigma_inverse: inv,
            noisy_rows: (0..dim).collect(),
            hoelder: Some((1.0, 0.0)),
        }
    }

    /// A general square `σ(t)`; the inverse is taken numerically when asked.
    pub fn time_dependent(dim: usize, sigma: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        let sigma = Arc::new(sigma);
        let s2 = sigma.clone();
        Self {
            dim,
            noise_dim: dim,
            sigma,
            sigma_inverse: Some(Arc::new(move |t| {
                s2(t).try_inverse().unwrap_or_else(|| DMatrix::from_element(dim, dim, f64::NAN))
            })),
            noisy_rows: (0..dim).collect(),
            hoelder: None,
        }
    }

    /// Noise acting on the last `l` of `m + l` coordinates through `σ2 = c I_l`.
    pub fn degenerate(m: usize, l: usize, c: f64) -> Self {
        let inv = if c != 0.0 {
            Some(Arc::new(move |_t: f64| DMatrix::identity(l, l) / c) as _)
        } else {
            None
        };
        Self {
            dim: m + l,
            noise_dim: l,
            sigma: Arc::new(move |_| DMatrix::identity(l, l) * c),
            sigma_inverse: inv,
            noisy_rows: (m..m + l).collect(),
            hoelder: Some((1.0, 0.0)),
        }
    }

    pub fn with_hoelder(mut self, order: f64, constant: f64) -> Self {
        self.hoelder = Some((order, constant));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimension `r` of the driving fBm.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn noisy_rows(&self) -> &[usize] {
        &self.noisy_rows
    }

    /// The `|noisy_rows| × r` block of `σ(t)`.
    pub fn sigma(&self, t: f64) -> DMatrix<f64> {
        (self.sigma)(t)
    }

    pub fn sigma_inverse(&self, t: f64) -> Option<DMatrix<f64>> {
        self.sigma_inverse.as_ref().map(|f| f(t))
    }

    pub fn has_inverse(&self) -> bool {
        self.sigma_inverse.is_some()
    }

    pub fn hoelder(&self) -> Option<(f64, f64)> {
        self.hoelder
    }

    pub fn is_zero(&self) -> bool {
        (self.sigma)(0.0).iter().all(|v| *v == 0.0)
    }

    /// Checks `σ σ^{-1} = I` within `1e-10` at the given times.
    pub fn check_inverse(&self, times: &[f64]) -> Result<()> {
        let Some(inv) = &self.sigma_inverse else {
            return Ok(());
        };
        for &t in times {
            let p = (self.sigma)(t) * inv(t);
            let err = (p - DMatrix::identity(self.noise_dim, self.noise_dim)).amax();
            if !(err <= 1e-10) {
                return Err(invalid("sigma_inverse", format!("σσ^{{-1}} - I = {err:e} at t = {t}")));
            }
        }
        Ok(())
    }
}

/// Law of the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent normal coordinates.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::Point(x) => x.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// `n` samples, row-major; sample `i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            match self {
                Self::Point(x) => out.extend_from_slice(x),
                Self::Gaussian { mean, sd } => {
                    let mut rng = stream(seed, Domain::InitialLaw, i as u64, 0);
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        out.push(mean[c] + sd[c] * z);
                    }
                }
            }
        }
        out
    }
}

/// A direction field `φ: R^d -> R^d`.
#[derive(Clone)]
pub struct Direction {
    name: String,
    f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl fmt::Debug for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Direction({})", self.name)
    }
}

impl Direction {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        Self::new(format!("const{v:?}"), move |_, out| out.copy_from_slice(&v))
    }

    /// `φ(x) = M x + v`.
    pub fn affine(m: DMatrix<f64>, v: DVector<f64>) -> Self {
        Self::new(format!("affine[M={:?}, v={:?}]", m.as_slice(), v.as_slice()), move |x, out| {
            let y = &m * DVector::from_column_slice(x) + &v;
            out.copy_from_slice(y.as_slice());
        })
    }

    /// `c1 φ1 + c2 φ2`.
    pub fn combine(c1: f64, p1: &Direction, c2: f64, p2: &Direction) -> Self {
        let (f1, f2) = (p1.f.clone(), p2.f.clone());
        Self::new(format!("{c1}*{} + {c2}*{}", p1.name, p2.name), move |x, out| {
            let mut tmp = vec![0.0; out.len()];
            f1(x, out);
            f2(x, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o = c1 * *o + c2 * t;
            }
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.f.clone();
        Self::new(format!("{c}*{}", self.name), move |x, out| {
            f(x, out);
            out.iter_mut().for_each(|v| *v *= c);
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    /// `‖φ‖_{L²_μ}`.
    pub fn l2_norm(&self, mu: &EmpiricalMeasure) -> f64 {
        let d = mu.dim();
        mu.expect(|x| {
            let mut v = vec![0.0; d];
            self.eval(x, &mut v);
            v.iter().map(|a| a * a).sum()
        })
        .sqrt()
    }
}

/// Model class for the Bismut construction.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    NonDegenerate,
    /// Kinetic system `dX1 = (A X1 + B X2) dt`, noise on `X2` only.
    Degenerate { a: DMatrix<f64>, b: DMatrix<f64> },
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::NonDegenerate => "nondegenerate",
            Self::Degenerate { .. } => "degenerate",
        }
    }
}

/// Everything needed to simulate and differentiate one model.
#[derive(Clone)]
pub struct Model {
    pub name: String,
    pub kind: ModelKind,
    pub drift: Arc<dyn Drift>,
    pub diffusion: Diffusion,
    pub init: InitialLaw,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("kind", &self.kind.label())
            .field("drift", &self.drift.name())
            .field("diffusion", &self.diffusion)
            .field("init", &self.init)
            .finish()
    }
}

impl Model {
    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.diffusion.dim() != d || self.init.dim() != d {
            return Err(invalid(
                "model",
                format!(
                    "dimensions disagree: drift {d}, diffusion {}, initial law {}",
                    self.diffusion.dim(),
                    self.init.dim()
                ),
            ));
        }
        if let ModelKind::Degenerate { a, b } = &self.kind {
            if a.nrows() != a.ncols() || b.nrows() != a.nrows() || a.nrows() + b.ncols() != d {
                return Err(invalid("model", "A must be m×m and B m×l with m + l = d"));
            }
        }
        Ok(())
    }
}

/// Default preset coefficients.
pub const PRESET_A: f64 = -0.3;
pub const PRESET_BETA: f64 = 0.3;

/// Shipped presets by name.
pub fn preset(name: &str, a: f64, beta: f64) -> Result<Model> {
    let model = match name {
        "pure-noise" => Model {
            name: name.into(),
            kind: ModelKind::NonDegenerate,
            drift: Arc::new(ZeroDrift { dim: 1 }),
            diffusion: Diffusion::scalar(1, 1.0),
            init: InitialLaw::Point(vec![0.0]),
        },
        "linear-meanfield" | "sin-interaction" => Model {
            name: name.into(),
            kind: ModelKind::NonDegenerate,
            drift: Arc::new(MeanFieldDrift {
                dim: 1,
                a,
                beta,
                interaction: if name == "linear-meanfield" {
                    Interaction::Mean
                } else {
                    Interaction::Sine
                },
            }),
            diffusion: Diffusion::scalar(1, 1.0),
            init: InitialLaw::Gaussian {
                mean: vec![0.5],
                sd: vec![0.5],
            },
        },
        "kinetic-degenerate" => {
            let (am, bm) = (DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
            Model {
                name: name.into(),
                kind: ModelKind::Degenerate { a: am.clone(), b: bm.clone() },
                drift: Arc::new(KineticDrift {
                    a: am,
                    b: bm,
                    b2: Arc::new(KineticForcing { m: 1, l: 1, a, beta }),
                }),
                diffusion: Diffusion::degenerate(1, 1, 1.0),
                init: InitialLaw::Gaussian {
                    mean: vec![0.5, 0.0],
                    sd: vec![0.5, 0.5],
                },
            }
        }
        other => {
            return Err(invalid(
                "preset",
                format!(
                    "unknown preset `{other}` (expected pure-noise, linear-meanfield, sin-interaction or kinetic-degenerate)"
                ),
            ))
        }
    };
    model.validate()?;
    Ok(model)
}

pub const PRESETS: [&str; 4] = ["pure-noise", "linear-meanfield", "sin-interaction", "kinetic-degenerate"];
