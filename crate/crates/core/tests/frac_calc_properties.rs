use approx::assert_relative_eq;
use mvfbm_core::frac_calc::*;
use mvfbm_core::quad::GaussLegendre;
use mvfbm_core::{GridFunction, HurstParam, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;

fn hp(h: f64) -> HurstParam {
    HurstParam::new(h).unwrap()
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[test]
fn semigroup_converges_at_first_order() {
    let (a, b) = (0.3, 0.45);
    let mut errs = Vec::new();
    for n in [64, 128, 256] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let f = GridFunction::from_fn(grid, |t| t * t.exp());
        let lhs = rl_integral_left(&rl_integral_left(&f, b).unwrap(), a).unwrap();
        let rhs = rl_integral_left(&f, a + b).unwrap();
        errs.push(lhs.sup_distance_from(&rhs, 0));
    }
    for p in orders(&errs) {
        assert!(p >= 1.0, "order {p}, errors {errs:?}");
    }
}

#[test]
fn weyl_inverts_rl_integral() {
    let a = 0.35;
    let mut errs = Vec::new();
    for n in [128, 256, 512] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let f = GridFunction::from_fn(grid, |t| t);
        let back = weyl_derivative_left(&rl_integral_left(&f, a).unwrap(), a).unwrap();
        errs.push(back.sup_distance_from(&f, 1));
    }
    assert!(errs[2] < 1e-2, "{errs:?}");
    for p in orders(&errs) {
        assert!((p - 1.0).abs() <= 0.3 * 1.0 + 0.1, "halving violated: {errs:?}");
    }
    // g = 1 recovers 1 away from the origin.
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let one = GridFunction::from_fn(grid, |_| 1.0);
    let back = weyl_derivative_left(&rl_integral_left(&one, a).unwrap(), a).unwrap();
    assert!(back.sup_distance_from(&one, 64) < 1e-2);
}

#[test]
fn kh_inverse_inverts_kh_forward() {
    let h = hp(0.7);
    let mut errs = Vec::new();
    for n in [128, 256, 512] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let f = GridFunction::from_fn(grid, |t| t);
        let hf = kh_forward(&f, h).unwrap();
        let back = apply_kh_inverse(&hf, h).unwrap().to_grid_function();
        errs.push(back.sup_distance_from(&f, 1));
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.4..=2.6).contains(&ratio), "{errs:?}");
    }
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let one = GridFunction::from_fn(grid, |_| 1.0);
    let back = apply_kh_inverse(&kh_forward(&one, h).unwrap(), h).unwrap().to_grid_function();
    assert!(back.sup_distance_from(&one, 64) < 2e-2);
}

#[test]
fn kernel_matches_independent_quadrature() {
    // Split ∫_s^t (u-s)^{a-1} u^a du = s^a L^a / a + ∫_s^t (u-s)^{a-1} (u^a - s^a) du;
    // the remainder is bounded and integrated on a graded mesh.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gl = GaussLegendre::new(20);
    for _ in 0..10 {
        let h = rng.random_range(0.52..0.97);
        let t = rng.random_range(0.2..3.0);
        let s = t * rng.random_range(0.02..0.98);
        let a = h - 0.5;
        let l = t - s;
        let mut rem = 0.0;
        let mut hi = l;
        for _ in 0..60 {
            let lo = hi * 0.6;
            rem += gl.integrate(lo, hi, |x| x.powf(a - 1.0) * ((s + x).powf(a) - s.powf(a)));
            hi = lo;
        }
        let inner = s.powf(a) * l.powf(a) / a + rem;
        let reference = kernel_constant(hp(h)) * s.powf(-a) * inner;
        assert_relative_eq!(kernel_kh(t, s, hp(h)).unwrap(), reference, max_relative = 1e-6);
    }
}

#[test]
fn kernel_factorizes_the_covariance() {
    let h = hp(0.75);
    let kernel = HurstKernel::new(h);
    let gl = GaussLegendre::new(40);
    let a = h.alpha();
    let pts = [0.3f64, 0.7, 1.0];
    for &t in &pts {
        for &s in &pts {
            let m = t.min(s);
            // r^{-2a} at 0 and (m-r)^a at m: substitute on each half.
            let f = |r: f64| kernel.eval(t, r) * kernel.eval(s, r);
            let g0 = 1.0 / (1.0 - 2.0 * a);
            let half = 0.5 * m;
            let left = gl.integrate(0.0, 1.0, |w| f(half * w.powf(g0)) * half * g0 * w.powf(g0 - 1.0));
            let right = gl.integrate_composite(half, m, 8, f);
            assert_relative_eq!(left + right, covariance_rh(t, s, h), max_relative = 1e-5);
        }
    }
}

#[test]
fn kh_star_is_an_isometry_on_steps() {
    let h = hp(0.7);
    let pts = [0.25, 0.5, 0.75, 1.0];
    let mut worst = Vec::new();
    for n in [64, 128, 256] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let step = |t1: f64| {
            let m = (t1 / grid.dt()).round() as usize;
            let v = (0..grid.n_nodes()).map(|k| if k < m { 1.0 } else { 0.0 }).collect();
            apply_kh_star(&GridFunction::scalar(grid, v).unwrap(), h).unwrap()
        };
        let images: Vec<_> = pts.iter().map(|&t| step(t)).collect();
        let mut err: f64 = 0.0;
        for (i, &t) in pts.iter().enumerate() {
            for (j, &s) in pts.iter().enumerate() {
                let ip = images[i].l2_inner(&images[j]).unwrap();
                err = err.max((ip - covariance_rh(t, s, h)).abs());
            }
        }
        worst.push(err);
    }
    // tol(n) = C / n with C fixed by the coarsest grid.
    let c = worst[0] * 64.0 * 1.3;
    for (e, n) in worst.iter().zip([64.0, 128.0, 256.0]) {
        assert!(*e <= c / n, "{worst:?}");
    }
    assert!(worst[2] < 5e-3, "{worst:?}");
}

#[test]
fn kh_inverse_power_rule_matches_closed_form() {
    // h(t) = t gives Γ(3/2-H) / (Γ(2-2H) c_H Γ(H-1/2)) s^{1/2-H}.
    let h = hp(0.7);
    let c = gamma(1.5 - 0.7) / (gamma(2.0 - 1.4) * kernel_constant(h) * gamma(0.2));
    let grid = TimeGrid::new(2.0, 64).unwrap();
    let z = apply_kh_inverse_from_derivative(&GridFunction::from_fn(grid, |_| 1.0), h).unwrap();
    for k in 1..=64 {
        assert_relative_eq!(z.value(k, 0), c * grid.t(k).powf(-0.2), max_relative = 1e-12);
    }
}
