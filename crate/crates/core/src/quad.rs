//! Gauss-Legendre rules and closed-form moments of power weights.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    /// `∫_a^b f(x) dx`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = b - a;
        self.iter().map(|(x, w)| w * f(a + h * x)).sum::<f64>() * h
    }

    /// Composite rule with `panels` equal panels.
    pub fn integrate_composite(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: impl FnMut(f64) -> f64,
    ) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|p| {
                let lo = a + p as f64 * h;
                self.integrate(lo, lo + h, &mut f)
            })
            .sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// `∫_a^b u^p du` for `0 <= a < b`, `p != -1`.
#[inline]
pub fn power_integral(a: f64, b: f64, p: f64) -> f64 {
    let q = p + 1.0;
    (b.powf(q) - a.powf(q)) / q
}

/// Product-integration weights on a cell `[lo, lo + h]` against `(x - s)^p`
/// with `x >= lo + h`: returns `(w_lo, w_hi)` such that
/// `∫ (x - s)^p f(s) ds ≈ w_lo f(lo) + w_hi f(lo + h)` is exact for linear `f`.
#[inline]
pub fn linear_weights_left_kernel(x: f64, lo: f64, h: f64, p: f64) -> (f64, f64) {
    let a = (x - lo - h).max(0.0);
    let b = x - lo;
    let m0 = power_integral(a, b, p);
    let m1 = power_integral(a, b, p + 1.0);
    // s - lo = b - u on the cell.
    let w_hi = (b * m0 - m1) / h;
    (m0 - w_hi, w_hi)
}

/// Product-integration weights on `[0, h]` against `s^p` (singular at 0).
#[inline]
pub fn linear_weights_origin(h: f64, p: f64) -> (f64, f64) {
    let m0 = h.powf(p + 1.0) / (p + 1.0);
    let w_hi = h.powf(p + 1.0) / (p + 2.0);
    (m0 - w_hi, w_hi)
}

/// Product-integration weights on `[lo, lo + h]` against `s^p`, `lo >= 0`.
#[inline]
pub fn linear_weights_power(lo: f64, h: f64, p: f64) -> (f64, f64) {
    if lo == 0.0 {
        return linear_weights_origin(h, p);
    }
    let m0 = power_integral(lo, lo + h, p);
    let m1 = power_integral(lo, lo + h, p + 1.0);
    let w_hi = (m1 - lo * m0) / h;
    (m0 - w_hi, w_hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(8);
        for deg in 0..16 {
            let v = gl.integrate(0.0, 2.0, |x| x.powi(deg));
            assert_relative_eq!(v, 2f64.powi(deg + 1) / (deg + 1) as f64, max_relative = 1e-13);
        }
        let weights: f64 = gl.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(weights, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn odd_rule_has_midpoint_node() {
        let gl = GaussLegendre::new(5);
        assert!(gl.iter().any(|(x, _)| (x - 0.5).abs() < 1e-15));
        assert_relative_eq!(gl.integrate(0.0, PI, f64::sin), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn linear_weights_reproduce_linear_functions() {
        let (p, x, lo, h) = (-1.3, 2.0, 0.5, 0.25);
        let (w0, w1) = linear_weights_left_kernel(x, lo, h, p);
        let f = |s: f64| 3.0 - 2.0 * s;
        let exact = GaussLegendre::new(30).integrate(lo, lo + h, |s| (x - s).powf(p) * f(s));
        assert_relative_eq!(w0 * f(lo) + w1 * f(lo + h), exact, max_relative = 1e-12);

        let (w0, w1) = linear_weights_origin(0.1, -0.3);
        // ∫_0^h s^p (1 + s) ds
        let exact = 0.1f64.powf(0.7) / 0.7 + 0.1f64.powf(1.7) / 1.7;
        assert_relative_eq!(w0 + w1 * 1.1, exact, max_relative = 1e-12);
    }
}
