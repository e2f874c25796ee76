use mvfbm_core::measure::{moment, pushforward_shift, wasserstein, wasserstein_detailed, EmpiricalMeasure};
use proptest::prelude::*;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, theta: f64) -> f64 {
    let n = mu.len();
    permutations(n)
        .iter()
        .map(|p| {
            (0..n)
                .map(|i| {
                    let d2: f64 = mu.atom(i).iter().zip(nu.atom(p[i])).map(|(a, b)| (a - b).powi(2)).sum();
                    d2.sqrt().powf(theta)
                })
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
        .powf(1.0 / theta)
}

fn atoms(dim: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-5.0..5.0f64, dim * n).prop_map(move |v| EmpiricalMeasure::new(dim, v).unwrap())
}

#[test]
fn assignment_matches_brute_force_on_four_atoms() {
    let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5, 3.0, -2.0]).unwrap();
    let nu = EmpiricalMeasure::new(2, vec![2.0, 1.0, 0.0, -1.0, -2.0, 2.0, 1.0, 1.0]).unwrap();
    for theta in [1.0, 1.5, 2.0, 3.0] {
        let w = wasserstein_detailed(&mu, &nu, theta).unwrap();
        assert!(w.exact);
        let bf = brute_force(&mu, &nu, theta);
        assert!((w.value - bf).abs() < 1e-12 * bf.max(1.0), "θ = {theta}: {} vs {bf}", w.value);
    }
}

#[test]
fn large_measures_fall_back_to_the_sliced_estimate() {
    let mk = |shift: f64| {
        EmpiricalMeasure::new(2, (0..1200).map(|i| ((i * 37 % 101) as f64) / 50.0 + shift).collect()).unwrap()
    };
    let w = wasserstein_detailed(&mk(0.0), &mk(0.5), 2.0).unwrap();
    assert!(!w.exact);
    // A pure translation by (0.5, 0.5): sliced W2 = |shift| / sqrt(2).
    assert!((w.value - 0.5).abs() < 0.05, "{}", w.value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sorted_coupling_is_optimal_in_one_dimension(mu in atoms(1, 6), nu in atoms(1, 6), theta in 1.0..3.0f64) {
        let w = wasserstein(&mu, &nu, theta).unwrap();
        let bf = brute_force(&mu, &nu, theta);
        prop_assert!((w - bf).abs() < 1e-10 * bf.max(1.0));
    }

    #[test]
    fn distance_is_a_metric(a in atoms(2, 5), b in atoms(2, 5), c in atoms(2, 5), theta in 1.0..3.0f64) {
        let ab = wasserstein(&a, &b, theta).unwrap();
        let ba = wasserstein(&b, &a, theta).unwrap();
        let bc = wasserstein(&b, &c, theta).unwrap();
        let ac = wasserstein(&a, &c, theta).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!(ac <= ab + bc + 1e-10);
        prop_assert!(wasserstein(&a, &a, theta).unwrap() < 1e-12);
    }

    #[test]
    fn distance_and_moment_grow_with_theta(a in atoms(2, 5), b in atoms(2, 5), t1 in 1.0..2.0f64, dt in 0.0..2.0f64) {
        let t2 = t1 + dt;
        prop_assert!(wasserstein(&a, &b, t1).unwrap() <= wasserstein(&a, &b, t2).unwrap() + 1e-10);
        prop_assert!(moment(&a, t1).unwrap() <= moment(&a, t2).unwrap() + 1e-10);
    }

    #[test]
    fn pushforward_moves_mass_by_at_most_the_shift(a in atoms(2, 6), eps in 0.0..1.0f64, theta in 1.0..3.0f64) {
        let phi = |x: &[f64]| vec![x[1].sin(), 1.0 + x[0] * 0.5];
        let moved = pushforward_shift(&a, phi, eps).unwrap();
        let norm = a.expect(|x| {
            let p = phi(x);
            (p[0] * p[0] + p[1] * p[1]).sqrt().powf(theta)
        }).powf(1.0 / theta);
        prop_assert!(wasserstein(&a, &moved, theta).unwrap() <= eps * norm + 1e-10);
    }
}
