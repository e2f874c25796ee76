use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mvfbm_cli::config::EXPERIMENTS;
use mvfbm_cli::{parse, run, write_outputs};

/// Run an mvfbm experiment.
///
/// Exit status: 0 when every check passes, 1 when a check fails,
/// 2 on configuration errors, 3 on numerical aborts.
#[derive(Parser, Debug)]
#[command(name = "mvfbm", version)]
struct Args {
    /// One of simulate, picard, bismut, fd-check, scaling, tv, validate.
    experiment: String,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; falls back to MVFBM_WORKERS. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides such as --sim.seed=7.
    #[arg(allow_hyphen_values = true, trailing_var_arg = true)]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if !EXPERIMENTS.contains(&args.experiment.as_str()) {
        eprintln!("error: unknown experiment `{}` (expected one of {})", args.experiment, EXPERIMENTS.join(", "));
        return ExitCode::from(2);
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match parse(&text, &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let workers = args
        .workers
        .or_else(|| std::env::var("MVFBM_WORKERS").ok().and_then(|v| v.parse().ok()))
        .filter(|w| *w > 0);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start workers: {e}");
            return ExitCode::from(3);
        }
    };
    let report = match pool.install(|| run(&args.experiment, &cfg)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {} aborted: {e}", args.experiment);
            return ExitCode::from(3);
        }
    };
    let dir = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    if let Err(e) = write_outputs(&report, &cfg, workers, &dir) {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::from(3);
    }
    for row in &report.rows {
        println!(
            "{} {} [{} / {}]: estimate {:.6} (se {:.2e}) vs {:.6} (se {:.2e})",
            if row.pass { "PASS" } else { "FAIL" },
            row.model,
            row.f,
            row.phi,
            row.estimate,
            row.se,
            row.oracle,
            row.oracle_se
        );
    }
    if report.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
