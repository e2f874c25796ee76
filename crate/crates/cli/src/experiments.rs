//! The experiment suite behind the `mvfbm` command.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use mvfbm_core::bismut::{
    bounded, clamp_radius, clamped_linear_oracle, cosine_family, estimate_fd_on, estimate_from_integrand, integrand,
    lderiv_norm_estimate_on, simulate, tv_probe_on, Report, RunSpec, Simulation,
};
use mvfbm_core::measure::TestFunction;
use mvfbm_core::model::{Direction, Model};
use mvfbm_core::sensitivity::variation_fd_check;
use mvfbm_core::solver::solve_picard;
use mvfbm_core::stats::{covariance_se, log_log_slope, mean, mean_se};
use mvfbm_core::{Error, TimeGrid};

use crate::config::RunConfig;

/// Everything an experiment produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub config_hash: String,
    pub rows: Vec<Report>,
    pub details: Value,
    #[serde(skip)]
    pub csv: Vec<(String, String)>,
}

impl RunReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Row for a check that is not an estimate-versus-oracle comparison.
fn check(model: &str, what: &str, estimate: f64, target: f64, pass: bool, seed: u64, n: usize) -> Report {
    Report {
        model: model.into(),
        f: what.into(),
        phi: "-".into(),
        n_paths: n,
        seed,
        estimate,
        se: 0.0,
        oracle: target,
        oracle_se: 0.0,
        pass,
    }
}

fn test_function(name: &str) -> TestFunction {
    match name {
        "linear" => TestFunction::coordinate(0),
        "sin" => TestFunction::sine(0),
        "cos" => TestFunction::new("cos", |x| x[0].cos())
            .with_gradient(|x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[0] = -x[0].sin();
            })
            .with_bounds(Some(1.0), Some(1.0)),
        _ => TestFunction::constant(1.0),
    }
}

fn direction(name: &str, dim: usize) -> Direction {
    match name {
        "affine" => Direction::new("1+x/2", move |x, o| {
            o.iter_mut().for_each(|v| *v = 0.0);
            o[0] = 1.0 + 0.5 * x[0];
        }),
        _ => {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            Direction::constant(e)
        }
    }
}

fn spec(cfg: &RunConfig, grid: TimeGrid, n: usize) -> RunSpec {
    RunSpec {
        grid,
        hurst: cfg.hurst(),
        n_paths: n,
        seed: cfg.sim.seed,
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out += &r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
    }
    out
}

fn model_of(cfg: &RunConfig) -> Model {
    cfg.build_model().expect("validated")
}

/// Runs one named experiment. Errors are numerical aborts.
pub fn run(name: &str, cfg: &RunConfig) -> Result<RunReport, Error> {
    let mut report = match name {
        "simulate" => simulate_exp(cfg),
        "picard" => picard(cfg),
        "bismut" => bismut(cfg),
        "fd-check" => fd_check(cfg),
        "scaling" => scaling(cfg),
        "tv" => tv(cfg),
        "validate" => validate(cfg),
        other => Err(Error::Other(format!("unknown experiment `{other}`"))),
    }?;
    report.experiment = name.into();
    report.config_hash = cfg.hash();
    Ok(report)
}

fn blank(rows: Vec<Report>, details: Value, csv: Vec<(String, String)>) -> RunReport {
    RunReport {
        experiment: String::new(),
        config_hash: String::new(),
        rows,
        details,
        csv,
    }
}

fn simulate_exp(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_paths.unwrap_or(cfg.sim.n_particles);
    let sim = simulate(&model, spec(cfg, cfg.grid(), n))?;
    let last = cfg.sim.n_steps;
    let bt: Vec<f64> = sim.noise.paths().iter().map(|p| p.bh(last)[0]).collect();
    let var = covariance_se(&bt, &bt);
    let (m, _) = mean_se(&bt);
    let sample_var = bt.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
    let target = cfg.sim.horizon.powf(2.0 * cfg.sim.hurst);
    let row = Report {
        model: model.name.clone(),
        f: "Var B^H_T".into(),
        phi: "-".into(),
        n_paths: n,
        seed: cfg.sim.seed,
        estimate: sample_var,
        se: var,
        oracle: target,
        oracle_se: 0.0,
        pass: (sample_var - target).abs() <= 3.0 * var,
    };
    let mut snap = Vec::new();
    sim.ens.write_snapshot_csv(last, &mut snap).map_err(|e| Error::Other(e.to_string()))?;
    let mut path = Vec::new();
    sim.noise.path(0).write_csv(&mut path).map_err(|e| Error::Other(e.to_string()))?;
    Ok(blank(
        vec![row],
        json!({ "terminal_mean": sim.ens.terminal().mean() }),
        vec![
            ("terminal.csv".into(), String::from_utf8(snap).expect("utf8")),
            ("path.csv".into(), String::from_utf8(path).expect("utf8")),
        ],
    ))
}

fn picard(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_particles;
    let sim = simulate(&model, spec(cfg, cfg.grid(), n))?;
    let iters = cfg.experiment.picard_iterations.max(2);
    let (fixed, errs) = solve_picard(model.drift.as_ref(), &model.diffusion, &sim.init, &sim.noise, iters)?;
    let gap = fixed.mean_sup_distance(&sim.ens, 2.0)?;
    // e_n is 1-based in the iteration count.
    let monotone = errs.windows(2).skip(1).all(|w| w[1] <= w[0]);
    let mut rows = vec![check(&model.name, "monotone after n = 2", monotone as u8 as f64, 1.0, monotone, cfg.sim.seed, n)];
    if iters >= 8 {
        let ratio = errs[7] / errs[3];
        rows.push(check(&model.name, "e_8 / e_4", ratio, 0.1, ratio < 0.1, cfg.sim.seed, n));
    }
    rows.push(check(&model.name, "distance to Euler", gap, 1e-6, gap < 1e-6 || iters < 8, cfg.sim.seed, n));
    Ok(blank(
        rows,
        json!({ "errors": errs, "distance_to_euler": gap }),
        vec![(
            "picard.csv".into(),
            csv("iteration,error", errs.iter().enumerate().map(|(i, e)| vec![(i + 1) as f64, *e])),
        )],
    ))
}

fn bismut(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_particles;
    let sim = simulate(&model, spec(cfg, cfg.grid(), n))?;
    let f = bounded(&test_function(&cfg.experiment.f), &sim)?;
    let phi = direction(&cfg.experiment.phi, model.dim());
    let (bi, deg) = integrand(&model, &sim, &phi)?;
    let b = estimate_from_integrand(&model, &sim, &f, &phi, &bi, deg)?;
    let fd = estimate_fd_on(&model, &sim, &f, &phi, &cfg.experiment.eps)?;
    let s = sim.spec;
    let mut rows = vec![
        Report::compare(&model.name, f.name(), phi.name(), &s, (b.centered_value, b.centered_std_error), (fd.extrapolated, fd.std_error)),
        Report::compare(&model.name, f.name(), phi.name(), &s, (b.value, b.std_error), (fd.extrapolated, fd.std_error)),
        Report::compare(&model.name, "delta", "-", &s, (b.delta_mean, b.delta_std_error), (0.0, 0.0)),
    ];
    let mut details = json!({ "bismut": b, "fd": fd });
    if model.name == "pure-noise" && cfg.experiment.f == "linear" && cfg.experiment.phi == "unit" {
        let radius = clamp_radius(&sim.ens)?;
        let sd = cfg.model.sigma * cfg.sim.horizon.powf(cfg.sim.hurst);
        let exact = clamped_linear_oracle(sd, radius);
        rows.push(Report::compare(&model.name, f.name(), phi.name(), &s, (b.centered_value, b.centered_std_error), (exact, 0.0)));
        details["exact"] = json!({ "value": exact, "clamp_radius": radius });
    }
    if let Some((gt, eig)) = deg {
        rows.push(check(&model.name, "max |g(T)|", gt, 1e-10, gt <= 1e-10, s.seed, n));
        rows.push(check(&model.name, "Gramian min eigenvalue", eig, 0.0, eig > 0.0, s.seed, n));
    }
    let i = cfg.experiment.dump_particle;
    let mut zeta = Vec::new();
    bi.write_zeta_csv(i, &mut zeta).map_err(|e| Error::Other(e.to_string()))?;
    let rho = bi.rho(i);
    let rho_csv = csv(
        &(0..rho.dim()).fold("t".to_string(), |h, c| format!("{h},rho_{}", c + 1)),
        (0..rho.grid().n_nodes()).map(|k| std::iter::once(rho.grid().t(k)).chain(rho.at(k).iter().copied()).collect()),
    );
    let fd_csv = csv(
        "eps,value,se",
        fd.eps.iter().zip(&fd.values).zip(&fd.std_errors).map(|((e, v), se)| vec![*e, *v, *se]),
    );
    Ok(blank(
        rows,
        details,
        vec![
            ("fd.csv".into(), fd_csv),
            ("zeta.csv".into(), String::from_utf8(zeta).expect("utf8")),
            ("rho.csv".into(), rho_csv),
        ],
    ))
}

fn fd_check(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_particles;
    let sim = simulate(&model, spec(cfg, cfg.grid(), n))?;
    let phi = direction(&cfg.experiment.phi, model.dim());
    let chk = variation_fd_check(model.drift.as_ref(), &model.diffusion, &sim.init, &sim.noise, &phi, &cfg.experiment.eps)?;
    let decreasing = chk.mean_sq_error.windows(2).all(|w| w[1] < w[0]);
    let rows = vec![
        check(&model.name, "error decreases in eps", decreasing as u8 as f64, 1.0, decreasing, cfg.sim.seed, n),
        check(&model.name, "order in eps", chk.order, 0.7, chk.order >= 0.7, cfg.sim.seed, n),
    ];
    let table = csv(
        "eps,mean_sq_error,ui_ratio",
        chk.eps.iter().zip(&chk.mean_sq_error).zip(&chk.ui_ratio).map(|((e, m), u)| vec![*e, *m, *u]),
    );
    Ok(blank(rows, json!({ "variation": {
        "eps": chk.eps, "mean_sq_error": chk.mean_sq_error, "ui_ratio": chk.ui_ratio, "order": chk.order
    } }), vec![("variation.csv".into(), table)]))
}

/// `E sup_k |σ B^H(t_k)|²` over the first noise component.
fn max_inequality(sim: &Simulation, sigma: f64) -> f64 {
    let vals: Vec<f64> = sim
        .noise
        .paths()
        .iter()
        .map(|p| {
            (0..sim.spec.grid.n_nodes())
                .map(|k| (sigma * p.bh(k)[0]).powi(2))
                .fold(0.0, f64::max)
        })
        .collect();
    mean(&vals)
}

fn scaling(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_particles;
    let f = test_function(&cfg.experiment.f);
    let d = model.dim();
    let basis = [
        direction("unit", d),
        Direction::new("x", move |x, o| {
            o.iter_mut().for_each(|v| *v = 0.0);
            o[0] = x[0];
        }),
    ];
    let mut table = Vec::new();
    let mut details = Vec::new();
    for &t in &cfg.experiment.horizons {
        let grid = TimeGrid::new(t, cfg.sim.n_steps)?;
        let sim = simulate(&model, spec(cfg, grid, n))?;
        let fb = bounded(&f, &sim)?;
        let est = lderiv_norm_estimate_on(&model, &sim, &fb, &basis)?;
        let mi = max_inequality(&sim, cfg.model.sigma);
        table.push(vec![t, est.bound_factor, est.sup_estimate, est.variance_factor, est.ratio, mi]);
        details.push(json!({ "T": t, "norm": est, "max_inequality": mi }));
    }
    let ts: Vec<f64> = table.iter().map(|r| r[0]).collect();
    let bf: Vec<f64> = table.iter().map(|r| r[1]).collect();
    let mi: Vec<f64> = table.iter().map(|r| r[5]).collect();
    let h = cfg.sim.hurst;
    let s_bf = log_log_slope(&ts, &bf);
    let s_mi = log_log_slope(&ts, &mi);
    let rows = vec![
        check(&model.name, "bound factor slope", s_bf, -h, (s_bf + h).abs() <= 0.15, cfg.sim.seed, n),
        check(&model.name, "maximal inequality slope", s_mi, 2.0 * h, (s_mi - 2.0 * h).abs() <= 0.15, cfg.sim.seed, n),
    ];
    Ok(blank(
        rows,
        json!({ "horizons": details, "bound_factor_slope": s_bf, "max_inequality_slope": s_mi }),
        vec![(
            "scaling.csv".into(),
            csv("T,bound_factor,sup_estimate,variance_factor,ratio,max_inequality", table),
        )],
    ))
}

fn tv(cfg: &RunConfig) -> Result<RunReport, Error> {
    let model = model_of(cfg);
    let n = cfg.sim.n_particles;
    let sim = simulate(&model, spec(cfg, cfg.grid(), n))?;
    let family = cosine_family(model.dim(), cfg.experiment.family_size.max(1), 1.0, cfg.sim.seed);
    let r = tv_probe_on(&model, &sim, &cfg.experiment.shifts, &family)?;
    let mut rows = vec![check(&model.name, "TV/W2 spread", r.spread, 3.0, r.spread < 3.0, cfg.sim.seed, n)];
    if cfg.experiment.family_size >= 128 {
        let worst = r
            .tv_lower
            .iter()
            .zip(&r.tv_lower_half_family)
            .map(|(full, half)| if *full > 0.0 { (full - half) / full } else { 0.0 })
            .fold(0.0, f64::max);
        rows.push(check(&model.name, "family saturation", worst, 0.1, worst <= 0.1, cfg.sim.seed, n));
    }
    let table = csv(
        "shift,w2,tv_lower,tv_lower_half_family,ratio",
        (0..r.shifts.len()).map(|i| vec![r.shifts[i], r.w2[i], r.tv_lower[i], r.tv_lower_half_family[i], r.ratio[i]]),
    );
    Ok(blank(rows, json!({ "tv": r }), vec![("tv.csv".into(), table)]))
}

/// Reduced-size run of every other experiment on the presets it suits.
fn validate(cfg: &RunConfig) -> Result<RunReport, Error> {
    let plan: [(&str, &str, &str, &str); 6] = [
        ("simulate", "pure-noise", "sin", "unit"),
        ("picard", "linear-meanfield", "sin", "unit"),
        ("fd-check", "sin-interaction", "sin", "affine"),
        ("bismut", "pure-noise", "linear", "unit"),
        ("scaling", "pure-noise", "linear", "unit"),
        ("tv", "sin-interaction", "sin", "unit"),
    ];
    let mut rows = Vec::new();
    let mut details = serde_json::Map::new();
    let mut files = Vec::new();
    for (exp, preset, f, phi) in plan {
        let mut sub = cfg.clone();
        sub.model.preset = preset.into();
        sub.model.kind = "nondegenerate".into();
        sub.model.dim = None;
        sub.model.sigma = 1.0;
        sub.sim.n_steps = sub.sim.n_steps.min(64);
        sub.sim.n_particles = sub.sim.n_particles.min(4000);
        sub.sim.n_paths = None;
        sub.experiment.f = f.into();
        sub.experiment.phi = phi.into();
        sub.experiment.dump_particle = 0;
        let r = run(exp, &sub)?;
        rows.extend(r.rows.into_iter().map(|mut row| {
            row.model = format!("{exp}:{}", row.model);
            row
        }));
        details.insert(exp.into(), r.details);
        files.extend(r.csv.into_iter().map(|(name, body)| (format!("{exp}-{name}"), body)));
    }
    Ok(blank(rows, Value::Object(details), files))
}

/// Writes `report.json`, the CSVs and `manifest.json` into `dir`.
pub fn write_outputs(report: &RunReport, cfg: &RunConfig, workers: Option<usize>, dir: &Path) -> io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if cfg.wants("json") {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
        written.push("report.json".to_string());
    }
    if cfg.wants("csv") {
        for (name, body) in &report.csv {
            fs::write(dir.join(name), body)?;
            written.push(name.clone());
        }
    }
    let manifest = json!({
        "experiment": report.experiment,
        "config_hash": report.config_hash,
        "config": cfg,
        "seed": cfg.sim.seed,
        "workers": workers,
        "version": env!("CARGO_PKG_VERSION"),
        "files": written,
        "pass": report.pass(),
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push("manifest.json".to_string());
    Ok(written)
}
