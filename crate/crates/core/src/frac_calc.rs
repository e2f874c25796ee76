//! Fractional Riemann-Liouville and Weyl operators on uniform grids, and the
//! fBm kernel `K_H` with its operators `K_H`, `K_H*` and `K_H^{-1}`.
//!
//! Every singular integral is done by product integration: the function is
//! replaced by its piecewise-linear interpolant and the power kernel is
//! integrated exactly on each cell.
//!
//! Kernel values use the representation
//! `K_H(t,s) = c_H s^{-a} ∫_s^t (u-s)^{a-1} u^a du`, `a = H - 1/2`, rewritten
//! as `K_H(t,s) = s^{-a} (t-s)^a Ĝ(t,s)` where
//! `Ĝ(t,s) = (c_H/a) ∫_0^1 (s + (t-s) v^{1/a})^a dv` is bounded and smooth away
//! from `s = 0`.

use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, HurstParam, TimeGrid};
use crate::quad::{
    linear_weights_left_kernel, linear_weights_origin, linear_weights_power, GaussLegendre,
};

/// `c_H = sqrt(H(2H-1) / B(2-2H, H-1/2))`.
pub fn kernel_constant(hurst: HurstParam) -> f64 {
    let h = hurst.value();
    (h * (2.0 * h - 1.0) / beta(2.0 - 2.0 * h, hurst.alpha())).sqrt()
}

/// Normalization of the inverse operator for the standard-fBm kernel:
/// `K_H^{-1} h = κ s^a D^a(s^{-a} h')` with `κ = 1 / (c_H Γ(a))`.
pub fn inverse_normalization(hurst: HurstParam) -> f64 {
    1.0 / (kernel_constant(hurst) * gamma(hurst.alpha()))
}

/// `K_H^{-1}` of `h(t) = t` is `C s^{-a}`; returns `C`.
pub fn power_rule_constant(hurst: HurstParam) -> f64 {
    let a = hurst.alpha();
    inverse_normalization(hurst) * gamma(1.0 - a) / gamma(1.0 - 2.0 * a)
}

/// `∫_0^1 (1 - u^{-a}) (1-u)^{-1-a} du = (Γ(1-a)²/Γ(1-2a) - 1)/a`.
pub fn weyl_gap_constant(alpha: f64) -> f64 {
    (gamma(1.0 - alpha).powi(2) / gamma(1.0 - 2.0 * alpha) - 1.0) / alpha
}

/// fBm covariance `R_H(t,s)`.
pub fn covariance_rh(t: f64, s: f64, hurst: HurstParam) -> f64 {
    let p = 2.0 * hurst.value();
    0.5 * (t.abs().powf(p) + s.abs().powf(p) - (t - s).abs().powf(p))
}

fn check_alpha(alpha: f64, closed_right: bool) -> Result<()> {
    let ok = alpha > 0.0 && (alpha < 1.0 || (closed_right && alpha == 1.0));
    if ok {
        Ok(())
    } else if closed_right {
        Err(invalid("alpha", format!("must lie in (0, 1], got {alpha}")))
    } else {
        Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

fn check_finite(f: &GridFunction) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(invalid("f", "grid function has non-finite values"))
    }
}

/// Left Riemann-Liouville integral `I^a_{0+}` with precomputed weights.
#[derive(Debug, Clone)]
pub struct RlIntegral {
    grid: TimeGrid,
    alpha: f64,
    // Row k holds (w_lo, w_hi) for cells 0..k, flattened.
    weights: Vec<(f64, f64)>,
}

impl RlIntegral {
    pub fn new(grid: TimeGrid, alpha: f64) -> Result<Self> {
        check_alpha(alpha, true)?;
        let n = grid.n_steps();
        let h = grid.dt();
        let scale = 1.0 / gamma(alpha);
        let mut weights = Vec::with_capacity(n * (n + 1) / 2);
        for k in 1..=n {
            let x = grid.t(k);
            for j in 0..k {
                let (a, b) = linear_weights_left_kernel(x, grid.t(j), h, alpha - 1.0);
                weights.push((a * scale, b * scale));
            }
        }
        Ok(Self { grid, alpha, weights })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Applies the operator to scalar node values.
    pub fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        let n = self.grid.n_steps();
        let mut out = vec![0.0; n + 1];
        let mut row = 0;
        for (k, o) in out.iter_mut().enumerate().skip(1) {
            let w = &self.weights[row..row + k];
            *o = w
                .iter()
                .enumerate()
                .map(|(j, (a, b))| a * f[j] + b * f[j + 1])
                .sum();
            row += k;
        }
        out
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        self.grid.ensure_same(f.grid())?;
        check_finite(f)?;
        map_components(f, |v| self.apply_values(v))
    }
}

/// Left Weyl fractional derivative
/// `D^a f(x) = (1/Γ(1-a)) [f(x)/x^a + a ∫_0^x (f(x)-f(y))/(x-y)^{1+a} dy]`.
///
/// Interior cells use linear interpolation of `f` against `(x-y)^{-1-a}`; on
/// the cell touching `x` the difference quotient is the local slope of `f`.
/// At `x = 0` the result is 0 when `f(0) = 0` and infinite otherwise.
#[derive(Debug, Clone)]
pub struct WeylDerivative {
    grid: TimeGrid,
    alpha: f64,
    inv_gamma: f64,
    // Row k holds (w_lo, w_hi) for cells 0..k-1, flattened.
    weights: Vec<(f64, f64)>,
    last_cell: f64,
}

impl WeylDerivative {
    pub fn new(grid: TimeGrid, alpha: f64) -> Result<Self> {
        check_alpha(alpha, false)?;
        let n = grid.n_steps();
        let h = grid.dt();
        let mut weights = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for k in 1..=n {
            let x = grid.t(k);
            for j in 0..k - 1 {
                weights.push(linear_weights_left_kernel(x, grid.t(j), h, -1.0 - alpha));
            }
        }
        Ok(Self {
            grid,
            alpha,
            inv_gamma: 1.0 / gamma(1.0 - alpha),
            weights,
            last_cell: h.powf(1.0 - alpha) / (1.0 - alpha),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        let n = self.grid.n_steps();
        let h = self.grid.dt();
        let mut out = vec![0.0; n + 1];
        out[0] = if f[0] == 0.0 { 0.0 } else { f[0].signum() * f64::INFINITY };
        let mut row = 0;
        for k in 1..=n {
            let fk = f[k];
            let w = &self.weights[row..row + k - 1];
            let mut acc = 0.0;
            for (j, (a, b)) in w.iter().enumerate() {
                acc += (a + b) * fk - (a * f[j] + b * f[j + 1]);
            }
            acc += (fk - f[k - 1]) / h * self.last_cell;
            out[k] = self.inv_gamma * (fk / self.grid.t(k).powf(self.alpha) + self.alpha * acc);
            row += k - 1;
        }
        out
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        self.grid.ensure_same(f.grid())?;
        check_finite(f)?;
        map_components(f, |v| self.apply_values(v))
    }
}

fn map_components(
    f: &GridFunction,
    op: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<GridFunction> {
    let dim = f.dim();
    let nodes = f.grid().n_nodes();
    let mut out = vec![0.0; nodes * dim];
    for c in 0..dim {
        let col = f.component(c);
        for (k, v) in op(col.values()).into_iter().enumerate() {
            out[k * dim + c] = v;
        }
    }
    GridFunction::new(*f.grid(), dim, out)
}

/// `I^a_{0+} f` on the grid of `f`.
pub fn rl_integral_left(f: &GridFunction, alpha: f64) -> Result<GridFunction> {
    RlIntegral::new(*f.grid(), alpha)?.apply(f)
}

/// `D^a_{0+} f` on the grid of `f`.
pub fn weyl_derivative_left(f: &GridFunction, alpha: f64) -> Result<GridFunction> {
    WeylDerivative::new(*f.grid(), alpha)?.apply(f)
}

const INNER_NODES: usize = 40;

/// Evaluator for `K_H` and its time derivative.
#[derive(Debug, Clone)]
pub struct HurstKernel {
    hurst: HurstParam,
    alpha: f64,
    c_h: f64,
    // (v^{1/a}, weight) for the inner integral of Ĝ.
    inner: Vec<(f64, f64)>,
}

impl HurstKernel {
    pub fn new(hurst: HurstParam) -> Self {
        let alpha = hurst.alpha();
        let inner = GaussLegendre::new(INNER_NODES)
            .iter()
            .map(|(v, w)| (v.powf(1.0 / alpha), w))
            .collect();
        Self {
            hurst,
            alpha,
            c_h: kernel_constant(hurst),
            inner,
        }
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// `Ĝ(t,s) = K_H(t,s) s^a / (t-s)^a`, finite for `0 <= s <= t`.
    #[inline]
    pub fn profile(&self, t: f64, s: f64) -> f64 {
        let l = t - s;
        let a = self.alpha;
        let sum: f64 = self.inner.iter().map(|(v, w)| w * (s + l * v).powf(a)).sum();
        self.c_h / a * sum
    }

    /// `s^a K_H(t,s)`, finite at `s = 0`.
    #[inline]
    pub fn regular(&self, t: f64, s: f64) -> f64 {
        if s >= t {
            return 0.0;
        }
        (t - s).powf(self.alpha) * self.profile(t, s)
    }

    /// `K_H(t,s)` for `0 < s < t`; zero for `s >= t`.
    #[inline]
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        self.regular(t, s) * s.powf(-self.alpha)
    }

    /// `∂_r K_H(r,s) = c_H (r/s)^a (r-s)^{a-1}`.
    #[inline]
    pub fn dr(&self, r: f64, s: f64) -> f64 {
        let a = self.alpha;
        self.c_h * (r / s).powf(a) * (r - s).powf(a - 1.0)
    }
}

/// `K_H(t,s)` for `0 < s < t`.
pub fn kernel_kh(t: f64, s: f64, hurst: HurstParam) -> Result<f64> {
    if !(s > 0.0) {
        return Err(invalid("s", format!("must be positive, got {s}")));
    }
    if !(s < t) {
        return Err(invalid("s", format!("must be smaller than t = {t}, got {s}")));
    }
    Ok(HurstKernel::new(hurst).eval(t, s))
}

/// `∂_r K_H(r,s)` for `0 < s < r`.
pub fn kernel_kh_dr(r: f64, s: f64, hurst: HurstParam) -> Result<f64> {
    if !(s > 0.0 && s < r) {
        return Err(invalid("s", format!("need 0 < s < r, got s={s}, r={r}")));
    }
    Ok(HurstKernel::new(hurst).dr(r, s))
}

/// A function of the form `s^{-a} g(s)` with `g` sampled on the grid.
///
/// Kernel operators produce integrable `s^{-a}` blow-ups at the origin; this
/// keeps the bounded factor so that `L²` products can be integrated exactly
/// against `s^{-2a}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularGridFunction {
    alpha: f64,
    regular: GridFunction,
}

impl SingularGridFunction {
    pub fn new(alpha: f64, regular: GridFunction) -> Self {
        Self { alpha, regular }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn grid(&self) -> &TimeGrid {
        self.regular.grid()
    }

    pub fn dim(&self) -> usize {
        self.regular.dim()
    }

    /// The bounded factor `g(s) = s^a f(s)`.
    pub fn regular(&self) -> &GridFunction {
        &self.regular
    }

    /// Value of component `c` at node `k`; infinite at `k = 0` unless `g(0) = 0`.
    pub fn value(&self, k: usize, c: usize) -> f64 {
        let g = self.regular.at(k)[c];
        if k == 0 {
            if g == 0.0 {
                0.0
            } else {
                g.signum() * f64::INFINITY
            }
        } else {
            g * self.grid().t(k).powf(-self.alpha)
        }
    }

    /// Node values for `k >= 1`; node 0 carries the limit described in [`Self::value`].
    pub fn to_grid_function(&self) -> GridFunction {
        let dim = self.dim();
        let values = (0..self.grid().n_nodes())
            .flat_map(|k| (0..dim).map(move |c| (k, c)))
            .map(|(k, c)| self.value(k, c))
            .collect();
        GridFunction::new(*self.grid(), dim, values).expect("shape preserved")
    }

    /// `∫_0^T <f(s), g(s)> ds`, integrating the product of the bounded factors
    /// exactly against `s^{-2a}` on every cell.
    pub fn l2_inner(&self, other: &SingularGridFunction) -> Result<f64> {
        self.grid().ensure_same(other.grid())?;
        if self.dim() != other.dim() || self.alpha != other.alpha {
            return Err(Error::GridMismatch("incompatible singular grid functions".into()));
        }
        let grid = *self.grid();
        let h = grid.dt();
        let p = -2.0 * self.alpha;
        let prod = |k: usize| -> f64 {
            self.regular
                .at(k)
                .iter()
                .zip(other.regular.at(k))
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut total = 0.0;
        let mut left = prod(0);
        for j in 0..grid.n_steps() {
            let right = prod(j + 1);
            let (a, b) = linear_weights_power(grid.t(j), h, p);
            total += a * left + b * right;
            left = right;
        }
        Ok(total)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).expect("same grid").max(0.0).sqrt()
    }
}

/// Cell moments of `K_H(t_k, ·)` on a grid:
/// `A_kj = ∫_cell_j K(t_k,s) ds`, `B_kj = ∫_cell_j K(t_k,s) (s-t_j)/Δ ds`,
/// the origin moment `S_k = ∫_0^Δ K(t_k,s) s^{-a} ds` and, when requested,
/// the diagonal moments `C_kj = ∫_cell_j K(t_k,s) (t_{j+1}-s)^a ds`.
#[derive(Debug, Clone)]
pub struct KernelTable {
    grid: TimeGrid,
    hurst: HurstParam,
    a: Vec<f64>,
    b: Vec<f64>,
    singular: Vec<f64>,
    diagonal: Vec<f64>,
}

const CELL_NODES: usize = 10;
const SIDE_NODES: usize = 14;
const EDGE_NODES: usize = 48;

impl KernelTable {
    /// Moments needed by the forward map `K_H`.
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Self {
        Self::build(grid, hurst, false)
    }

    /// Also computes the diagonal moments used by the Volterra generator.
    pub fn with_diagonal_moments(grid: TimeGrid, hurst: HurstParam) -> Self {
        Self::build(grid, hurst, true)
    }

    fn build(grid: TimeGrid, hurst: HurstParam, diag: bool) -> Self {
        let kernel = HurstKernel::new(hurst);
        let alpha = hurst.alpha();
        let n = grid.n_steps();
        let rules = CellRules::new(alpha);
        let size = n * (n + 1) / 2;
        let mut a = Vec::with_capacity(size);
        let mut b = Vec::with_capacity(size);
        let mut diagonal = Vec::with_capacity(if diag { size } else { 0 });
        let mut singular = vec![0.0; n + 1];
        let h = grid.dt();
        let mut pts = Vec::new();
        for k in 1..=n {
            let t = grid.t(k);
            for j in 0..k {
                let lo = grid.t(j);
                let hi = grid.t(j + 1);
                rules.points(t, lo, hi, alpha, 0.0, &mut pts);
                let (mut m0, mut m1) = (0.0, 0.0);
                for &(s, w) in &pts {
                    let g = w * kernel.profile(t, s);
                    m0 += g;
                    m1 += g * (s - lo) / h;
                }
                a.push(m0);
                b.push(m1);
                if diag {
                    rules.points(t, lo, hi, alpha, alpha, &mut pts);
                    diagonal.push(pts.iter().map(|&(s, w)| w * kernel.profile(t, s)).sum());
                }
            }
            rules.points(t, 0.0, h, 2.0 * alpha, 0.0, &mut pts);
            singular[k] = pts.iter().map(|&(s, w)| w * kernel.profile(t, s)).sum();
        }
        Self {
            grid,
            hurst,
            a,
            b,
            singular,
            diagonal,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    #[inline]
    fn idx(k: usize, j: usize) -> usize {
        k * (k - 1) / 2 + j
    }

    /// `∫_{t_j}^{t_{j+1}} K(t_k, s) ds`, `j < k`.
    #[inline]
    pub fn cell_integral(&self, k: usize, j: usize) -> f64 {
        self.a[Self::idx(k, j)]
    }

    /// `∫_{t_j}^{t_{j+1}} K(t_k, s) (s - t_j)/Δ ds`, `j < k`.
    #[inline]
    pub fn cell_first_moment(&self, k: usize, j: usize) -> f64 {
        self.b[Self::idx(k, j)]
    }

    /// `∫_0^Δ K(t_k, s) s^{-a} ds`, `k >= 1`.
    #[inline]
    pub fn singular_moment(&self, k: usize) -> f64 {
        self.singular[k]
    }

    /// `∫_{t_j}^{t_{j+1}} K(t_k, s) (t_{j+1} - s)^a ds`, `j < k`; only
    /// available on tables built with [`KernelTable::with_diagonal_moments`].
    #[inline]
    pub fn diagonal_moment(&self, k: usize, j: usize) -> Option<f64> {
        self.diagonal.get(Self::idx(k, j)).copied()
    }

    /// `(K_H f)(t_k) = ∫_0^{t_k} K(t_k,s) f(s) ds` for piecewise-linear `f`.
    pub fn forward(&self, f: &GridFunction) -> Result<GridFunction> {
        self.grid.ensure_same(f.grid())?;
        check_finite(f)?;
        let n = self.grid.n_steps();
        map_components(f, |v| {
            let mut out = vec![0.0; n + 1];
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                *o = (0..k)
                    .map(|j| v[j] * self.cell_integral(k, j) + (v[j + 1] - v[j]) * self.cell_first_moment(k, j))
                    .sum();
            }
            out
        })
    }
}

/// Quadrature points for `∫_lo^hi s^{-β} (t-s)^a (hi-s)^e g(s) ds` with
/// smooth `g`. Power singularities at either end are absorbed by the
/// substitution `x = m w^{1/(1+p)}`, splitting the cell when both ends are
/// singular.
struct CellRules {
    alpha: f64,
    interior: GaussLegendre,
    side: GaussLegendre,
    edge: GaussLegendre,
}

impl CellRules {
    fn new(alpha: f64) -> Self {
        Self {
            alpha,
            interior: GaussLegendre::new(CELL_NODES),
            side: GaussLegendre::new(SIDE_NODES),
            edge: GaussLegendre::new(EDGE_NODES),
        }
    }

    fn points(&self, t: f64, lo: f64, hi: f64, beta: f64, e: f64, out: &mut Vec<(f64, f64)>) {
        out.clear();
        let a = self.alpha;
        let touches_t = hi >= t;
        let left = if lo == 0.0 && beta != 0.0 { Some(-beta) } else { None };
        let pr = if touches_t { a + e } else { e };
        let right = if pr != 0.0 { Some(pr) } else { None };
        // Product of the weight factors not absorbed by a substitution.
        let rest = |s: f64, absorb_left: bool, absorb_right: bool| -> f64 {
            let mut v = 1.0;
            if left.is_some() && !absorb_left {
                v *= s.powf(-beta);
            }
            if !absorb_right || !touches_t {
                v *= (t - s).powf(a);
            }
            if !absorb_right && e != 0.0 {
                v *= (hi - s).powf(e);
            }
            if lo > 0.0 && beta != 0.0 {
                v *= s.powf(-beta);
            }
            v
        };
        // Only cells touching 0 or t need the fine rule.
        let rule = if lo == 0.0 || touches_t { &self.edge } else { &self.side };
        match (left, right) {
            (Some(pl), Some(pr)) => {
                let mid = 0.5 * (lo + hi);
                Self::left_points(rule, mid, pl, |s| rest(s, true, false), out);
                Self::right_points(rule, mid, hi, pr, |s| rest(s, false, true), out);
            }
            (Some(pl), None) => Self::left_points(rule, hi, pl, |s| rest(s, true, false), out),
            (None, Some(pr)) => Self::right_points(rule, lo, hi, pr, |s| rest(s, false, true), out),
            (None, None) => {
                let h = hi - lo;
                out.extend(self.interior.iter().map(|(x, w)| {
                    let s = lo + h * x;
                    (s, w * h * rest(s, false, false))
                }));
            }
        }
    }

    // ∫_0^m s^p f(s) ds with s = m w^{1/(1+p)}.
    fn left_points(rule: &GaussLegendre, m: f64, p: f64, f: impl Fn(f64) -> f64, out: &mut Vec<(f64, f64)>) {
        let g = 1.0 / (1.0 + p);
        let scale = m.powf(1.0 + p) * g;
        out.extend(rule.iter().map(|(x, w)| {
            let s = m * x.powf(g);
            (s, w * scale * f(s))
        }));
    }

    // ∫_lo^hi (hi-s)^p f(s) ds with hi - s = (hi-lo) w^{1/(1+p)}.
    fn right_points(
        rule: &GaussLegendre,
        lo: f64,
        hi: f64,
        p: f64,
        f: impl Fn(f64) -> f64,
        out: &mut Vec<(f64, f64)>,
    ) {
        let g = 1.0 / (1.0 + p);
        let c = hi - lo;
        let scale = c.powf(1.0 + p) * g;
        out.extend(rule.iter().map(|(x, w)| {
            let s = hi - c * x.powf(g);
            (s, w * scale * f(s))
        }));
    }
}

/// `K_H f` on the grid of `f`.
pub fn kh_forward(f: &GridFunction, hurst: HurstParam) -> Result<GridFunction> {
    KernelTable::new(*f.grid(), hurst).forward(f)
}

/// `(K_H* ψ)(s) = K_H(T,s)ψ(s) + ∫_s^T (ψ(r)-ψ(s)) ∂_r K_H(r,s) dr`.
///
/// `ψ` is read as piecewise constant, `ψ_k` on `[t_k, t_{k+1})`, which is the
/// natural reading for step and adapted integrands. The `dr`-integral over
/// each cell is then exact, since `∫_cell ∂_r K(r,s) dr` is a difference of
/// kernel values.
pub fn apply_kh_star(psi: &GridFunction, hurst: HurstParam) -> Result<SingularGridFunction> {
    check_finite(psi)?;
    let grid = *psi.grid();
    let kernel = HurstKernel::new(hurst);
    let n = grid.n_steps();
    let dim = psi.dim();
    let mut out = vec![0.0; grid.n_nodes() * dim];
    let mut g = vec![0.0; n + 1];
    for j in 0..n {
        let s = grid.t(j);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = if i > j { kernel.regular(grid.t(i), s) } else { 0.0 };
        }
        for c in 0..dim {
            out[j * dim + c] = (j..n).map(|i| psi.at(i)[c] * (g[i + 1] - g[i])).sum();
        }
    }
    Ok(SingularGridFunction::new(
        hurst.alpha(),
        GridFunction::new(grid, dim, out)?,
    ))
}

/// `K_H^{-1}` from sampled derivative values `q = h'`.
///
/// Evaluates `κ s^a D^a(s^{-a} q)` by splitting
/// `s^{-a} q(s) = q(0) s^{-a} + r(s)`: the first part has the closed form
/// `D^a s^{-a} = Γ(1-a)/Γ(1-2a) s^{-2a}` and `r(0) = 0` is handled by the
/// Weyl product-integration rule.
pub fn apply_kh_inverse_from_derivative(
    q: &GridFunction,
    hurst: HurstParam,
) -> Result<SingularGridFunction> {
    let weyl = WeylDerivative::new(*q.grid(), hurst.alpha())?;
    kh_inverse_with(&weyl, q, hurst)
}

pub(crate) fn kh_inverse_with(
    weyl: &WeylDerivative,
    q: &GridFunction,
    hurst: HurstParam,
) -> Result<SingularGridFunction> {
    weyl.grid.ensure_same(q.grid())?;
    check_finite(q)?;
    let grid = *q.grid();
    let a = hurst.alpha();
    let kappa = inverse_normalization(hurst);
    let lead = gamma(1.0 - a) / gamma(1.0 - 2.0 * a);
    let regular = map_components(q, |v| {
        let q0 = v[0];
        let mut r: Vec<f64> = (0..v.len())
            .map(|k| if k == 0 { 0.0 } else { (v[k] - q0) * grid.t(k).powf(-a) })
            .collect();
        r = weyl.apply_values(&r);
        (0..v.len())
            .map(|k| kappa * (q0 * lead + grid.t(k).powf(2.0 * a) * if k == 0 { 0.0 } else { r[k] }))
            .collect()
    })?;
    Ok(SingularGridFunction::new(a, regular))
}

/// `K_H^{-1} h` with `h'` taken as forward-difference slopes (the last node
/// repeats the last slope).
pub fn apply_kh_inverse(h: &GridFunction, hurst: HurstParam) -> Result<SingularGridFunction> {
    check_finite(h)?;
    let scale = h.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if h.at(0).iter().any(|v| v.abs() > 1e-12 * scale) {
        return Err(invalid("h", "K_H^{-1} needs h(0) = 0"));
    }
    let grid = *h.grid();
    let n = grid.n_steps();
    let dim = h.dim();
    let dt = grid.dt();
    let mut q = vec![0.0; grid.n_nodes() * dim];
    for k in 0..=n {
        let j = k.min(n - 1);
        for c in 0..dim {
            q[k * dim + c] = (h.at(j + 1)[c] - h.at(j)[c]) / dt;
        }
    }
    apply_kh_inverse_from_derivative(&GridFunction::new(grid, dim, q)?, hurst)
}

/// Product-integration weights for
/// `E_k[u, v] = ∫_0^{t_k} v(s) (u(t_k) - u(s)) s^{-a} (t_k - s)^{-1-a} ds`
/// with `u`, `v` piecewise linear.
///
/// Interior cells interpolate `v (u_k - u) s^{-a}` against `(t_k-s)^{-1-a}`;
/// the origin cell interpolates `v (u_k - u) (t_k-s)^{-1-a}` against `s^{-a}`;
/// the cell touching `t_k` uses the local slope of `u` and interpolates
/// `v s^{-a}` against `(t_k-s)^{-a}`. For `k = 1` Beta moments are exact.
#[derive(Debug, Clone)]
pub struct SingularDifferenceTable {
    grid: TimeGrid,
    alpha: f64,
    interior: Vec<(f64, f64)>,
    origin: (f64, f64),
    last: Vec<(f64, f64)>,
    first_cell: (f64, f64),
}

impl SingularDifferenceTable {
    pub fn new(grid: TimeGrid, alpha: f64) -> Result<Self> {
        check_alpha(alpha, false)?;
        let n = grid.n_steps();
        let h = grid.dt();
        let mut interior = Vec::new();
        let mut last = vec![(0.0, 0.0); n + 1];
        for k in 2..=n {
            let x = grid.t(k);
            for j in 1..k - 1 {
                interior.push(linear_weights_left_kernel(x, grid.t(j), h, -1.0 - alpha));
            }
            last[k] = linear_weights_left_kernel(x, grid.t(k - 1), h, -alpha);
        }
        // k = 1: ∫_0^Δ s^{-a} (Δ-s)^{-a} (v0 + (v1-v0) s/Δ) ds.
        let scale = h.powf(1.0 - 2.0 * alpha);
        let b0 = beta(1.0 - alpha, 1.0 - alpha);
        let b1 = beta(2.0 - alpha, 1.0 - alpha);
        Ok(Self {
            grid,
            alpha,
            interior,
            origin: linear_weights_origin(h, -alpha),
            last,
            first_cell: (scale * (b0 - b1), scale * b1),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `E_k` for scalar `u` and `v` given at nodes `0..=k`.
    pub fn eval(&self, k: usize, u: &[f64], v: &[f64]) -> f64 {
        self.eval_with(k, |j| v[j] * (u[k] - u[j]), |j| v[j], (u[k] - u[k.saturating_sub(1)]) / self.grid.dt())
    }

    /// General form: `p(j) = v_j (u_k - u_j)`, `vj(j) = v_j`, `slope` of `u` on the last cell.
    pub fn eval_with(
        &self,
        k: usize,
        p: impl Fn(usize) -> f64,
        vj: impl Fn(usize) -> f64,
        slope: f64,
    ) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let a = self.alpha;
        if k == 1 {
            let (w0, w1) = self.first_cell;
            return slope * (w0 * vj(0) + w1 * vj(1));
        }
        let x = self.grid.t(k);
        let pw = |j: usize| self.grid.t(j).powf(-a);
        let mut acc = 0.0;
        // Origin cell.
        let (o0, o1) = self.origin;
        let h = self.grid.dt();
        acc += o0 * p(0) * x.powf(-1.0 - a) + o1 * p(1) * (x - h).powf(-1.0 - a);
        // Interior cells 1..k-1.
        let row = (k - 2) * (k.max(3) - 3) / 2;
        let w = &self.interior[row..row + k - 2];
        let mut prev = p(1) * pw(1);
        for (i, (wl, wh)) in w.iter().enumerate() {
            let j = i + 1;
            let next = p(j + 1) * pw(j + 1);
            acc += wl * prev + wh * next;
            prev = next;
        }
        let (l0, l1) = self.last[k];
        acc + slope * (l0 * vj(k - 1) * pw(k - 1) + l1 * vj(k) * pw(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(h: f64) -> HurstParam {
        HurstParam::new(h).unwrap()
    }

    #[test]
    fn constants_match_reference_values() {
        let cases = [
            (0.6, 0.896670986776505988587545721961, 1.02365836030454140362095588521),
            (0.7, 0.779863664917080419938646279455, 1.00246501664425765374857760514),
            (0.75, 0.713096423354660216067138220041, 0.969528546762097762836329618336),
            (0.9, 0.450678137857418063758394560935, 0.719766729108989977615931389264),
        ];
        for (h, cz, chg) in cases {
            assert_relative_eq!(power_rule_constant(hp(h)), cz, max_relative = 1e-10);
            assert_relative_eq!(kernel_constant(hp(h)) * gamma(h - 0.5), chg, max_relative = 1e-10);
        }
    }

    #[test]
    fn gap_constant_matches_quadrature() {
        let a = 0.3;
        // (1 - u^{-a})(1-u)^{-1-a}: split the two endpoint singularities.
        let gl = GaussLegendre::new(60);
        let f = |u: f64| (1.0 - u.powf(-a)) * (1.0 - u).powf(-1.0 - a);
        // u = w^{1/(1-a)} near 0, 1-u = w^{1/(1-a)} near 1 (integrand ~ (1-u)^{-a}).
        let g = 1.0 / (1.0 - a);
        let left = gl.integrate(0.0, 1.0, |w| f(0.5 * w.powf(g)) * 0.5 * g * w.powf(g - 1.0));
        let right = gl.integrate(0.0, 1.0, |w| f(1.0 - 0.5 * w.powf(g)) * 0.5 * g * w.powf(g - 1.0));
        assert_relative_eq!(left + right, weyl_gap_constant(a), max_relative = 1e-6);
    }

    #[test]
    fn kernel_golden_value() {
        let v = kernel_kh(1.0, 0.5, hp(0.75)).unwrap();
        assert_relative_eq!(v, 0.937591963698057233302766129367, max_relative = 1e-10);
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(kernel_kh(1.0, 0.0, hp(0.7)).is_err());
        assert!(kernel_kh(1.0, 1.0, hp(0.7)).is_err());
        assert!(kernel_kh(1.0, 1.5, hp(0.7)).is_err());
    }

    #[test]
    fn kernel_vanishes_on_the_diagonal() {
        // K(t, t - L) ~ C L^a as L -> 0.
        let k = HurstKernel::new(hp(0.6));
        let scaled: Vec<f64> = [1e-4, 1e-8, 1e-12]
            .iter()
            .map(|l: &f64| k.eval(1.0, 1.0 - l) / l.powf(0.1))
            .collect();
        assert_relative_eq!(scaled[1], scaled[2], max_relative = 1e-3);
        assert_relative_eq!(scaled[0], scaled[2], max_relative = 1e-3);
        assert!(k.eval(1.0, 1.0 - 1e-12) < k.eval(1.0, 1.0 - 1e-8));
    }

    #[test]
    fn dr_is_the_time_derivative() {
        let k = HurstKernel::new(hp(0.7));
        let (r, s, e) = (0.9, 0.4, 1e-5);
        let fd = (k.eval(r + e, s) - k.eval(r - e, s)) / (2.0 * e);
        assert_relative_eq!(k.dr(r, s), fd, max_relative = 1e-7);
    }

    #[test]
    fn kernel_table_golden_moments() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let t = KernelTable::new(grid, hp(0.75));
        assert_relative_eq!(t.cell_integral(4, 0), 0.32996856660846249746, max_relative = 1e-7);
        assert_relative_eq!(t.cell_integral(4, 3), 0.15249328490659512216, max_relative = 1e-7);
        assert_relative_eq!(t.cell_first_moment(4, 2), 0.10368374483626724737, max_relative = 1e-7);
        assert_relative_eq!(t.singular_moment(4), 0.67505965215810147295, max_relative = 1e-7);
        assert_relative_eq!(t.cell_integral(1, 0), 0.16801938636841181975, max_relative = 1e-7);
        assert_relative_eq!(t.singular_moment(1), 0.3505837244615929292, max_relative = 1e-7);
        assert!(t.diagonal_moment(4, 3).is_none());
        let d = KernelTable::with_diagonal_moments(grid, hp(0.75));
        assert_relative_eq!(d.diagonal_moment(4, 3).unwrap(), 0.089919005911652485142, max_relative = 1e-7);
        assert_relative_eq!(d.diagonal_moment(4, 1).unwrap(), 0.14471917440850143808, max_relative = 1e-6);
        assert_relative_eq!(d.diagonal_moment(4, 0).unwrap(), 0.19174251817374008123, max_relative = 1e-7);
        assert_relative_eq!(d.diagonal_moment(1, 0).unwrap(), 0.10038119487189061203, max_relative = 1e-7);
    }

    #[test]
    fn rl_integral_of_constants() {
        let grid = TimeGrid::new(2.0, 64).unwrap();
        let one = GridFunction::from_fn(grid, |_| 1.0);
        let i1 = rl_integral_left(&one, 1.0).unwrap();
        for k in 0..=64 {
            assert_relative_eq!(i1.value(k), grid.t(k), epsilon = 1e-13);
        }
        let ih = rl_integral_left(&one, 0.5).unwrap();
        for k in 0..=64 {
            let t = grid.t(k);
            assert_relative_eq!(ih.value(k), t.sqrt() / gamma(1.5), epsilon = 1e-13);
        }
        let zero = GridFunction::zeros(grid, 2);
        assert!(rl_integral_left(&zero, 0.3).unwrap().values().iter().all(|v| *v == 0.0));
        assert!(rl_integral_left(&one, 0.0).is_err());
        assert!(rl_integral_left(&one, 1.2).is_err());
    }

    #[test]
    fn weyl_derivative_power_rule() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let a = 0.3;
        let f = GridFunction::from_fn(grid, |x| x);
        let d = weyl_derivative_left(&f, a).unwrap();
        // Exact for linear f up to rounding.
        for k in 1..=256 {
            let x = grid.t(k);
            assert_relative_eq!(d.value(k), x.powf(1.0 - a) / gamma(2.0 - a), max_relative = 1e-11);
        }
        assert_eq!(d.value(0), 0.0);
        assert!(weyl_derivative_left(&f, 1.0).is_err());
    }

    #[test]
    fn kh_star_of_constant_is_kernel_at_horizon() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let h = hp(0.7);
        let k = HurstKernel::new(h);
        let out = apply_kh_star(&GridFunction::from_fn(grid, |_| 1.0), h).unwrap();
        for j in 1..32 {
            let s = grid.t(j);
            assert_relative_eq!(out.value(j, 0), k.eval(1.0, s), max_relative = 1e-12);
        }
        let zero = apply_kh_star(&GridFunction::zeros(grid, 1), h).unwrap();
        assert!(zero.regular().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kh_inverse_of_identity_is_power_law() {
        let h = hp(0.7);
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let z = apply_kh_inverse(&GridFunction::from_fn(grid, |t| t), h).unwrap();
        let c = 0.779863664917080419938646279455;
        for k in 1..=128 {
            let s = grid.t(k);
            assert_relative_eq!(z.value(k, 0), c * s.powf(0.5 - 0.7), max_relative = 1e-10);
        }
        assert_relative_eq!(z.regular().value(0), c, max_relative = 1e-10);
        let bad = GridFunction::from_fn(grid, |t| 1.0 + t);
        assert!(apply_kh_inverse(&bad, h).is_err());
        let zero = apply_kh_inverse(&GridFunction::zeros(grid, 1), h).unwrap();
        assert!(zero.regular().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn difference_table_matches_direct_quadrature() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let a = 0.25;
        let table = SingularDifferenceTable::new(grid, a).unwrap();
        let u: Vec<f64> = grid.nodes().iter().map(|t| t * t + t).collect();
        let v: Vec<f64> = grid.nodes().iter().map(|t| 1.0 + 0.5 * t).collect();
        let k = 40;
        let x = grid.t(k);
        // (u(x)-u(s)) = (x-s)(x+s+1) for u = s² + s, so the integrand is
        // v(s)(x+s+1) s^{-a} (x-s)^{-a}.
        let gl = GaussLegendre::new(60);
        let g = 1.0 / (1.0 - a);
        let f = |s: f64| (1.0 + 0.5 * s) * (x + s + 1.0) * s.powf(-a) * (x - s).powf(-a);
        let m = 0.5 * x;
        let left = gl.integrate(0.0, 1.0, |w| f(m * w.powf(g)) * m * g * w.powf(g - 1.0));
        let right = gl.integrate(0.0, 1.0, |w| f(x - m * w.powf(g)) * m * g * w.powf(g - 1.0));
        let exact = left + right;
        assert_relative_eq!(table.eval(k, &u, &v), exact, max_relative = 2e-3);
        let k1 = table.eval(1, &u, &v);
        let x1 = grid.t(1);
        let f1 = |s: f64| (1.0 + 0.5 * s) * (x1 + s + 1.0) * s.powf(-a) * (x1 - s).powf(-a);
        let m1 = 0.5 * x1;
        let e1 = gl.integrate(0.0, 1.0, |w| f1(m1 * w.powf(g)) * m1 * g * w.powf(g - 1.0))
            + gl.integrate(0.0, 1.0, |w| f1(x1 - m1 * w.powf(g)) * m1 * g * w.powf(g - 1.0));
        assert_relative_eq!(k1, e1, max_relative = 2e-2);
    }
}
