//! Run configuration: a TOML file with `model`, `sim`, `experiment` and
//! `output` tables, plus `--section.key=value` overrides.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use mvfbm_core::model::{preset, Diffusion, Model, ModelKind, PRESET_A, PRESET_BETA};
use mvfbm_core::{HurstParam, TimeGrid};

pub const EXPERIMENTS: [&str; 7] = ["simulate", "picard", "bismut", "fd-check", "scaling", "tv", "validate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sim: SimSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `nondegenerate` or `degenerate`; must match the preset.
    pub kind: String,
    pub preset: String,
    /// State dimension; must match the preset when given.
    pub dim: Option<usize>,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Constant noise intensity.
    #[serde(default = "one")]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub hurst: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    pub n_steps: usize,
    /// Interacting particles per system.
    pub n_particles: usize,
    /// Monte Carlo sample size for fBm-level checks; estimators use `n_particles`.
    #[serde(default)]
    pub n_paths: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Overridden by the command-line experiment name.
    #[serde(default)]
    pub name: Option<String>,
    /// `linear`, `sin`, `cos` or `const`, applied to the first coordinate.
    #[serde(default = "default_f")]
    pub f: String,
    /// `unit` (first basis vector) or `affine` (`1 + x/2` on the first coordinate).
    #[serde(default = "default_phi")]
    pub phi: String,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_picard")]
    pub picard_iterations: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    #[serde(default = "default_shifts")]
    pub shifts: Vec<f64>,
    #[serde(default = "default_family")]
    pub family_size: usize,
    /// Particle whose `ζ` trajectory is dumped.
    #[serde(default)]
    pub dump_particle: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: None,
            f: default_f(),
            phi: default_phi(),
            eps: default_eps(),
            picard_iterations: default_picard(),
            horizons: default_horizons(),
            shifts: default_shifts(),
            family_size: default_family(),
            dump_particle: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Any of `json`, `csv`.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

fn default_a() -> f64 {
    PRESET_A
}
fn default_beta() -> f64 {
    PRESET_BETA
}
fn one() -> f64 {
    1.0
}
fn default_f() -> String {
    "sin".into()
}
fn default_phi() -> String {
    "unit".into()
}
fn default_eps() -> Vec<f64> {
    mvfbm_core::bismut::DEFAULT_EPS.to_vec()
}
fn default_picard() -> usize {
    8
}
fn default_horizons() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0]
}
fn default_shifts() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.125]
}
fn default_family() -> usize {
    128
}
fn default_dir() -> PathBuf {
    "out".into()
}
fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into()]
}

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn field(name: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("field `{name}`: {msg}"))
}

/// Parses TOML text and applies `section.key=value` overrides. Override
/// values are read as TOML literals, falling back to plain strings.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(format!("config: {e}")))?;
    for o in overrides {
        let body = o.trim_start_matches("--");
        let (path, raw) = body
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{o}` is not of the form --section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| ConfigError(format!("override `{o}` needs a section, as in --sim.seed=7")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let table = doc
            .entry(section.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override `{o}`: `{section}` is not a table")))?;
        table.insert(key.to_string(), value);
    }
    let cfg: RunConfig = Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.sim;
        if !(s.hurst > 0.5 && s.hurst < 1.0) {
            return Err(field("sim.hurst", format!("must lie in (1/2, 1), got {}", s.hurst)));
        }
        if s.n_steps < 16 {
            return Err(field("sim.n_steps", format!("must be at least 16, got {}", s.n_steps)));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(field("sim.horizon", "must be positive"));
        }
        if s.n_particles < 2 {
            return Err(field("sim.n_particles", "must be at least 2"));
        }
        if let Some(name) = &self.experiment.name {
            if !EXPERIMENTS.contains(&name.as_str()) {
                return Err(field("experiment.name", format!("unknown experiment `{name}`")));
            }
        }
        if !["linear", "sin", "cos", "const"].contains(&self.experiment.f.as_str()) {
            return Err(field("experiment.f", format!("expected linear, sin, cos or const, got `{}`", self.experiment.f)));
        }
        if !["unit", "affine"].contains(&self.experiment.phi.as_str()) {
            return Err(field("experiment.phi", format!("expected unit or affine, got `{}`", self.experiment.phi)));
        }
        let e = &self.experiment.eps;
        if e.len() < 2 || e.windows(2).any(|w| !(w[1] < w[0])) || e.iter().any(|v| !(*v > 0.0)) {
            return Err(field("experiment.eps", "need at least two positive, strictly decreasing values"));
        }
        if self.experiment.horizons.len() < 2 || self.experiment.horizons.iter().any(|t| !(*t > 0.0)) {
            return Err(field("experiment.horizons", "need at least two positive horizons"));
        }
        if self.experiment.shifts.iter().any(|c| !(*c > 0.0)) {
            return Err(field("experiment.shifts", "shifts must be positive"));
        }
        if self.experiment.dump_particle >= s.n_particles {
            return Err(field("experiment.dump_particle", "beyond the particle count"));
        }
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return Err(field("output.formats", format!("unknown format `{f}`")));
            }
        }
        let model = self.build_model()?;
        if self.model.kind != model.kind.label() {
            return Err(field(
                "model.kind",
                format!("preset `{}` is {}, not {}", self.model.preset, model.kind.label(), self.model.kind),
            ));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model, ConfigError> {
        let m = &self.model;
        let mut model = preset(&m.preset, m.a, m.beta).map_err(|e| field("model.preset", e))?;
        if let Some(d) = m.dim {
            if d != model.dim() {
                return Err(field("model.dim", format!("preset `{}` has dimension {}", m.preset, model.dim())));
            }
        }
        if !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return Err(field("model.sigma", "must be positive"));
        }
        if m.sigma != 1.0 {
            model.diffusion = match &model.kind {
                ModelKind::NonDegenerate => Diffusion::scalar(model.dim(), m.sigma),
                ModelKind::Degenerate { a, b } => Diffusion::degenerate(a.nrows(), b.ncols(), m.sigma),
            };
        }
        Ok(model)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.sim.horizon, self.sim.n_steps).expect("validated")
    }

    pub fn hurst(&self) -> HurstParam {
        HurstParam::new(self.sim.hurst).expect("validated")
    }

    /// SHA-256 of the resolved configuration in canonical TOML.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}
