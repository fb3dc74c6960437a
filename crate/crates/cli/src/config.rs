//! Run configuration: one JSON document per experiment.

use std::fmt;
use std::path::Path;

use fbsvie::bsvie::SolverConfig;
use fbsvie::control::{OptimizeConfig, ProblemKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Largest tree the CLI accepts; `2^12` leaves keeps every command interactive.
pub const MAX_CLI_STEPS: usize = 12;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub duality: DualityConfig,
    #[serde(default)]
    pub gradient: GradientConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

fn c1() -> ProblemKind {
    ProblemKind::C1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "c1")]
    pub kind: ProblemKind,
    pub family: String,
    #[serde(default = "empty_object")]
    pub params: Value,
    #[serde(default)]
    pub control: ControlInit,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

/// Starting control: a constant vector, or uniform on the control set from a
/// seed. Zero when neither is given.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlInit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualityConfig {
    pub instances: usize,
    pub seed: u64,
    pub dim: usize,
    /// Kernel entries are uniform in `[-bound, bound]`.
    pub bound: f64,
    /// Multiplies the free term and the adjoint drivers.
    pub data_scale: f64,
    pub tolerance: f64,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            dim: 2,
            bound: 1.0,
            data_scale: 1.0,
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Random,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientConfig {
    pub pairs: usize,
    pub seed: u64,
    /// Finite-difference steps; two or more also give a Richardson check.
    pub eps: Vec<f64>,
    /// Variational against adjoint pairing.
    pub tolerance: f64,
    /// Finite differences against the variational derivative.
    pub fd_tolerance: f64,
    pub direction: Direction,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            pairs: 5,
            seed: 0,
            eps: vec![1.0],
            tolerance: 1e-8,
            fd_tolerance: 1e-8,
            direction: Direction::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
    /// Wall-clock timings make reports differ between runs, so they are opt-in.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec![Format::Json, Format::Csv],
            timing: false,
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// A configuration problem, located by its key path.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.reason)
        } else {
            write!(f, "`{}`: {}", self.key, self.reason)
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { String::new() } else { path };
            ConfigError::new(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=MAX_CLI_STEPS).contains(&self.grid.steps) {
            return Err(ConfigError::new(
                "grid.steps",
                format!("must lie in 1..={MAX_CLI_STEPS}, got {}", self.grid.steps),
            ));
        }
        positive("grid.horizon", self.grid.horizon)?;
        self.solver
            .validate()
            .and_then(|_| self.optimize.validate())
            .map_err(|e| match e {
                fbsvie::Error::MalformedParams { key, reason } => ConfigError::new(key, reason),
                other => ConfigError::new("", other.to_string()),
            })?;
        let d = &self.duality;
        if d.instances == 0 {
            return Err(ConfigError::new("duality.instances", "must be at least 1"));
        }
        if !(1..=4).contains(&d.dim) {
            return Err(ConfigError::new("duality.dim", "must lie in 1..=4"));
        }
        if !(d.bound >= 0.0 && d.bound.is_finite()) {
            return Err(ConfigError::new("duality.bound", "must be nonnegative and finite"));
        }
        if !(d.data_scale >= 0.0 && d.data_scale.is_finite()) {
            return Err(ConfigError::new("duality.data_scale", "must be nonnegative and finite"));
        }
        positive("duality.tolerance", d.tolerance)?;
        let g = &self.gradient;
        if g.pairs == 0 {
            return Err(ConfigError::new("gradient.pairs", "must be at least 1"));
        }
        if g.eps.is_empty() {
            return Err(ConfigError::new("gradient.eps", "needs at least one step"));
        }
        for (k, e) in g.eps.iter().enumerate() {
            positive(&format!("gradient.eps[{k}]"), *e)?;
        }
        positive("gradient.tolerance", g.tolerance)?;
        positive("gradient.fd_tolerance", g.fd_tolerance)?;
        if self.output.directory.is_empty() {
            return Err(ConfigError::new("output.directory", "must not be empty"));
        }
        if let Some(p) = &self.problem {
            if p.control.constant.is_some() && p.control.random_seed.is_some() {
                return Err(ConfigError::new(
                    "problem.control",
                    "give either `constant` or `random_seed`, not both",
                ));
            }
        }
        Ok(())
    }

    /// Applies `--seed` to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.duality.seed = seed;
        self.gradient.seed = seed;
        if let Some(p) = &mut self.problem {
            if p.control.random_seed.is_some() {
                p.control.random_seed = Some(seed);
            }
        }
    }
}
