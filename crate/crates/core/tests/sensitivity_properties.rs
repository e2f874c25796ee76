use mvfbm_core::fbm::{generate_batch, PathBatch, VolterraWeights};
use mvfbm_core::grid::{HurstParam, TimeGrid};
use mvfbm_core::model::{preset, Direction, Model, ModelKind, PRESET_A, PRESET_BETA};
use mvfbm_core::sensitivity::{
    build_h_degenerate, build_h_nondegenerate, malliavin_flow_particles, skorokhod_delta, variation_fd_check,
    variation_flow, BismutIntegrand, BuildOptions,
};
use mvfbm_core::solver::{solve_euler, ParticleEnsemble};
use mvfbm_core::stats::mean_var;

struct Run {
    model: Model,
    noise: PathBatch,
    ens: ParticleEnsemble,
}

fn run(name: &str, n: usize, steps: usize, h: f64, seed: u64) -> Run {
    let model = preset(name, PRESET_A, PRESET_BETA).unwrap();
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let weights = VolterraWeights::new(grid, HurstParam::new(h).unwrap()).unwrap();
    let noise = generate_batch(&weights, model.diffusion.noise_dim(), n, seed).unwrap();
    let init = model.init.sample(n, seed);
    let ens = solve_euler(model.drift.as_ref(), &model.diffusion, &init, &noise).unwrap();
    Run { model, noise, ens }
}

fn build(r: &Run, phi: &Direction, h: f64) -> BismutIntegrand {
    let var = variation_flow(&r.ens, r.model.drift.as_ref(), phi).unwrap();
    let hp = HurstParam::new(h).unwrap();
    match &r.model.kind {
        ModelKind::NonDegenerate => build_h_nondegenerate(&r.ens, &var, &r.model.diffusion, hp, BuildOptions::default()).unwrap(),
        kind => build_h_degenerate(kind, &r.ens, &var, r.model.drift.as_ref(), &r.model.diffusion, hp, BuildOptions::default())
            .unwrap()
            .0,
    }
}

/// Largest `|Y_N - Γ_N|` over particles.
fn chain_rule_gap(r: &Run, phi: &Direction, h: f64) -> f64 {
    let bi = build(r, phi, h);
    let var = variation_flow(&r.ens, r.model.drift.as_ref(), phi).unwrap();
    let y = malliavin_flow_particles(&r.ens, r.model.drift.as_ref(), &r.model.diffusion, &bi.rh_all()).unwrap();
    let (n, d, steps) = (r.ens.len(), r.ens.dim(), r.ens.grid().n_steps());
    let y = &y;
    (0..n)
        .flat_map(|i| {
            let g = var.gamma(steps, i).to_vec();
            let o = (steps * n + i) * d;
            (0..d).map(move |c| (y[o + c] - g[c]).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn malliavin_flow_hits_the_variation_at_the_horizon() {
    let phi = Direction::new("1+x/2", |x, o| o[0] = 1.0 + 0.5 * x[0]);
    for name in ["linear-meanfield", "sin-interaction"] {
        let r = run(name, 40, 64, 0.7, 11);
        let gap = chain_rule_gap(&r, &phi, 0.7);
        assert!(gap < 1e-12, "{name}: {gap}");
    }
}

#[test]
fn degenerate_flow_is_steered_to_the_variation() {
    let phi = Direction::constant(vec![1.0, 1.0]);
    for steps in [32, 128] {
        let gap = chain_rule_gap(&run("kinetic-degenerate", 30, steps, 0.7, 3), &phi, 0.7);
        assert!(gap < 1e-11, "{steps}: {gap}");
    }
}

#[test]
fn zeta_routes_agree_on_a_fine_grid() {
    let phi = Direction::new("x", |x, o| o[0] = x[0]);
    let r = run("sin-interaction", 12, 512, 0.75, 2);
    let bi = build(&r, &phi, 0.75);
    assert!(bi.route_discrepancy() < 0.02, "{}", bi.route_discrepancy());
    let r = run("kinetic-degenerate", 8, 512, 0.75, 2);
    let bi = build(&r, &Direction::constant(vec![1.0, -0.5]), 0.75);
    assert!(bi.route_discrepancy() < 0.02, "{}", bi.route_discrepancy());
}

#[test]
fn integrand_is_linear_in_the_direction() {
    let r = run("sin-interaction", 10, 64, 0.65, 9);
    let p1 = Direction::constant(vec![1.0]);
    let p2 = Direction::new("x^2", |x, o| o[0] = x[0] * x[0]);
    let combo = Direction::combine(2.0, &p1, -0.5, &p2);
    let (b1, b2, b3) = (build(&r, &p1, 0.65), build(&r, &p2, 0.65), build(&r, &combo, 0.65));
    for i in 0..10 {
        for k in 0..=64 {
            let reg = |b: &BismutIntegrand| b.zeta(i).regular().at(k)[0];
            let want = 2.0 * reg(&b1) - 0.5 * reg(&b2);
            let got = reg(&b3);
            assert!((got - want).abs() <= 1e-10 * (1.0 + want.abs()), "{i} {k}: {got} vs {want}");
        }
    }
}

#[test]
fn skorokhod_integral_is_centered_with_the_right_energy() {
    for (name, phi) in [
        ("pure-noise", Direction::constant(vec![1.0])),
        ("sin-interaction", Direction::new("x", |x, o| o[0] = x[0])),
        ("kinetic-degenerate", Direction::constant(vec![1.0, 0.0])),
    ] {
        let r = run(name, 20_000, 32, 0.7, 4);
        let bi = build(&r, &phi, 0.7);
        let delta = skorokhod_delta(&bi, &r.noise).unwrap();
        let (m, v) = mean_var(&delta);
        let n = delta.len() as f64;
        assert!(m.abs() < 4.0 * (v / n).sqrt(), "{name}: mean {m}");
        let sq: Vec<f64> = delta.iter().map(|x| x * x).collect();
        let (m2, v2) = mean_var(&sq);
        let target = bi.mean_adapted_energy();
        assert!((m2 - target).abs() < 4.0 * (v2 / n).sqrt(), "{name}: E δ² {m2} vs {target}");
        // The continuous energy differs from the discrete one only by the
        // cell-wise freezing of t^a ζ.
        let cont = bi.mean_energy();
        assert!((cont - target).abs() < 0.1 * target, "{name}: {cont} vs {target}");
    }
}

#[test]
fn variation_matches_finite_differences() {
    let r = run("sin-interaction", 200, 64, 0.7, 8);
    let init: Vec<f64> = (0..200).flat_map(|i| r.ens.state(0, i).to_vec()).collect();
    let phi = Direction::new("1+x", |x, o| o[0] = 1.0 + x[0]);
    let chk = variation_fd_check(r.model.drift.as_ref(), &r.model.diffusion, &init, &r.noise, &phi, &[0.1, 0.05, 0.025])
        .unwrap();
    assert!(chk.order > 1.7, "{chk:?}");
    assert!(chk.ui_ratio.iter().all(|u| *u < 10.0), "{chk:?}");
    // With no drift the quotient is φ itself, up to rounding.
    let pn = run("pure-noise", 50, 16, 0.7, 8);
    let chk = variation_fd_check(pn.model.drift.as_ref(), &pn.model.diffusion, &[0.3; 50], &pn.noise, &phi, &[0.1, 0.01])
        .unwrap();
    assert!(chk.mean_sq_error.iter().all(|e| *e < 1e-24), "{chk:?}");
}
