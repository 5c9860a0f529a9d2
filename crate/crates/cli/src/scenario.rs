//! Scenario files: one TOML document per experiment.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlf_core::transport::{Datum, ScalarFn};
use rlf_core::vectorfield::{catalog, FieldParams, VectorField};
use rlf_core::weakform::TestFunction;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Free-form label; part of the hashed text only.
    #[serde(default)]
    #[allow(dead_code)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub field: FieldSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub datum: Option<DatumSpec>,
    #[serde(default)]
    pub test_function: Option<TestFunctionSpec>,
    #[serde(default)]
    pub assumptions: AssumptionSpec,
    #[serde(default)]
    pub lusin: LusinSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub residual: ResidualSpec,
    #[serde(default)]
    pub fv: FvSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Scalar(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default = "two")]
    pub dim: usize,
    /// Horizon `T`.
    pub horizon: f64,
    #[serde(default)]
    pub params: BTreeMap<String, Param>,
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub radius: f64,
    pub dy: f64,
    /// Spacing of the recorded time slices.
    pub dt: f64,
    /// RK4 step.
    pub step: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumSpec {
    Zero,
    Constant {
        value: f64,
    },
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Bump {
        center: Vec<f64>,
        radius: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Piecewise constant on the cells of the `dy`-lattice, uniform in
    /// `[-amplitude, amplitude]`, zero outside `B_{R + dy}`.
    Noise {
        amplitude: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    Bump {
        #[serde(default = "one")]
        amplitude: f64,
        t_center: f64,
        t_radius: f64,
        center: Vec<f64>,
        radius: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionSpec {
    pub box_radius: Option<f64>,
    #[serde(default = "five")]
    pub t_samples: usize,
    #[serde(default = "twenty_one")]
    pub x_samples: usize,
}

fn five() -> usize {
    5
}
fn twenty_one() -> usize {
    21
}

impl Default for AssumptionSpec {
    fn default() -> Self {
        Self {
            box_radius: None,
            t_samples: 5,
            x_samples: 21,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LusinMethod {
    Threshold,
    Budget,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LusinSpec {
    /// Budgets as fractions of `|B_R|`.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: LusinMethod,
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}
fn default_method() -> LusinMethod {
    LusinMethod::Budget
}

impl Default for LusinSpec {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
            method: default_method(),
            thresholds: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    /// `(t, x..)`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub lattice_dx: Option<f64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_budget")]
    pub pair_budget: usize,
    /// Factor in the rule "largest lambda with `L_lambda <= factor * L`".
    #[serde(default = "default_factor")]
    pub select_factor: f64,
    #[serde(default)]
    pub clamp: bool,
    pub tube_tol: Option<f64>,
    #[serde(default)]
    pub queries: Vec<Query>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05, 0.025]
}
fn default_budget() -> usize {
    rlf_core::metric::DEFAULT_PAIR_BUDGET
}
fn default_factor() -> f64 {
    1.1
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            lattice_dx: None,
            lambdas: default_lambdas(),
            pair_budget: default_budget(),
            select_factor: default_factor(),
            clamp: false,
            tube_tol: None,
            queries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSpec {
    /// Quadrature spacings `h`, used as `(dx, dt) = (h, h)`.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

fn default_levels() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}

impl Default for ResidualSpec {
    fn default() -> Self {
        Self {
            levels: default_levels(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvSpec {
    /// Half-width of the square box.
    #[serde(default = "default_box")]
    pub box_radius: f64,
    #[serde(default = "default_fv_dx")]
    pub dx: Vec<f64>,
    /// Target CFL number; the time step is chosen to meet it.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Comparison time; defaults to the horizon.
    pub t_final: Option<f64>,
    /// RK4 step of the characteristic reference solution.
    #[serde(default = "default_reference_step")]
    pub reference_step: f64,
}

fn default_box() -> f64 {
    2.0
}
fn default_fv_dx() -> Vec<f64> {
    vec![0.04, 0.02, 0.01]
}
fn default_cfl() -> f64 {
    0.8
}
fn default_reference_step() -> f64 {
    0.01
}

impl Default for FvSpec {
    fn default() -> Self {
        Self {
            box_radius: default_box(),
            dx: default_fv_dx(),
            cfl: default_cfl(),
            t_final: None,
            reference_step: default_reference_step(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
}

/// A parsed scenario with its source text, kept for hashing and error lines.
pub struct Loaded {
    pub scenario: Scenario,
    pub text: String,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

pub fn parse(text: &str, origin: &str) -> Result<Loaded, CliError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| format!(" at line {}", line_of_offset(text, s.start)))
            .unwrap_or_default();
        CliError::Config(format!("{origin}{line}: {}", e.message()))
    })?;
    let sha256 = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let loaded = Loaded {
        scenario,
        text: text.to_string(),
        sha256,
    };
    loaded.validate(origin)?;
    Ok(loaded)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]` (dotted for nested tables), if present.
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(n + 1);
                }
            }
        }
    }
    None
}

impl Loaded {
    fn fail(&self, origin: &str, section: &str, key: &str, msg: String) -> CliError {
        let at = locate(&self.text, section, key)
            .map(|l| format!(" at line {l}"))
            .unwrap_or_else(|| format!(" in [{section}]"));
        CliError::Config(format!("{origin}{at}: `{key}` {msg}"))
    }

    fn validate(&self, origin: &str) -> Result<(), CliError> {
        let s = &self.scenario;
        let positive = |section: &str, key: &str, v: f64| -> Result<(), CliError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(self.fail(origin, section, key, format!("must be positive and finite, got {v}")))
            }
        };
        positive("field", "horizon", s.field.horizon)?;
        positive("grid", "radius", s.grid.radius)?;
        positive("grid", "dy", s.grid.dy)?;
        positive("grid", "dt", s.grid.dt)?;
        positive("grid", "step", s.grid.step)?;
        let n = (s.field.horizon / s.grid.dt).round();
        if (n * s.grid.dt - s.field.horizon).abs() > 1e-9 * s.field.horizon {
            return Err(self.fail(
                origin,
                "grid",
                "dt",
                format!("must divide the horizon {} into whole slices", s.field.horizon),
            ));
        }
        if let Some(dx) = s.metric.lattice_dx {
            positive("metric", "lattice_dx", dx)?;
        }
        if s.metric.lambdas.is_empty()
            || s.metric.lambdas.iter().any(|l| !(*l > 0.0 && *l <= 1.0))
            || s.metric.lambdas.windows(2).any(|w| !(w[1] < w[0]))
        {
            return Err(self.fail(
                origin,
                "metric",
                "lambdas",
                "must be a nonempty strictly decreasing list in (0, 1]".into(),
            ));
        }
        if s.metric.pair_budget < 4 {
            return Err(self.fail(origin, "metric", "pair_budget", "must be at least 4".into()));
        }
        positive("metric", "select_factor", s.metric.select_factor)?;
        if s.lusin.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(self.fail(
                origin,
                "lusin",
                "epsilons",
                "must be fractions of |B_R| strictly between 0 and 1".into(),
            ));
        }
        if s.residual.levels.iter().any(|h| !(*h > 0.0)) {
            return Err(self.fail(origin, "residual", "levels", "must all be positive".into()));
        }
        positive("fv", "box_radius", s.fv.box_radius)?;
        positive("fv", "cfl", s.fv.cfl)?;
        positive("fv", "reference_step", s.fv.reference_step)?;
        if s.fv.dx.is_empty() || s.fv.dx.iter().any(|h| !(*h > 0.0)) {
            return Err(self.fail(origin, "fv", "dx", "must be a nonempty list of positive spacings".into()));
        }
        if let Some(t) = s.fv.t_final {
            if !(t > 0.0 && t <= s.field.horizon) {
                return Err(self.fail(origin, "fv", "t_final", format!("must lie in (0, {}]", s.field.horizon)));
            }
        }
        let dim = s.field.dim;
        if let Some(d) = &s.datum {
            let center = match d {
                DatumSpec::Gaussian { center, .. } | DatumSpec::Bump { center, .. } => Some(center),
                _ => None,
            };
            if center.is_some_and(|c| c.len() != dim) {
                return Err(self.fail(origin, "datum", "center", format!("must have {dim} entries")));
            }
        }
        if let Some(TestFunctionSpec::Bump { center, .. }) = &s.test_function {
            if center.len() != dim {
                return Err(self.fail(origin, "test_function", "center", format!("must have {dim} entries")));
            }
        }
        for q in &s.metric.queries {
            if q.p.len() != dim + 1 || q.q.len() != dim + 1 {
                return Err(CliError::Config(format!(
                    "{origin}: metric queries take (t, x..) with {} entries",
                    dim + 1
                )));
            }
        }
        self.field().map_err(|e| self.fail(origin, "field", "name", e.to_string()))?;
        Ok(())
    }

    pub fn field(&self) -> rlf_core::Result<VectorField> {
        let f = &self.scenario.field;
        let mut params = FieldParams::default();
        for (k, v) in &f.params {
            let list = match v {
                Param::Scalar(x) => vec![*x],
                Param::List(l) => l.clone(),
            };
            params = params.with(k, list);
        }
        catalog(&f.name, f.dim, f.horizon, &params)
    }

    pub fn times(&self) -> Vec<f64> {
        let s = &self.scenario;
        let n = (s.field.horizon / s.grid.dt).round() as usize;
        (0..=n).map(|k| s.field.horizon * k as f64 / n as f64).collect()
    }

    pub fn lattice_dx(&self) -> f64 {
        self.scenario.metric.lattice_dx.unwrap_or(self.scenario.grid.dy)
    }

    pub fn datum(&self, command: &str) -> Result<ScalarFn, CliError> {
        let spec = self
            .scenario
            .datum
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`{command}` needs a [datum] section")))?;
        Ok(match spec {
            DatumSpec::Zero => Datum::Zero.to_fn(),
            DatumSpec::Constant { value } => Datum::Constant(*value).to_fn(),
            DatumSpec::Gaussian {
                center,
                sigma,
                amplitude,
            } => Datum::Gaussian {
                center: center.clone(),
                sigma: *sigma,
                amplitude: *amplitude,
            }
            .to_fn(),
            DatumSpec::Bump {
                center,
                radius,
                amplitude,
            } => Datum::Bump {
                center: center.clone(),
                radius: *radius,
                amplitude: *amplitude,
            }
            .to_fn(),
            DatumSpec::Noise { amplitude, seed } => {
                self.noise(*amplitude, seed.unwrap_or(self.scenario.seed))
            }
        })
    }

    fn noise(&self, amplitude: f64, seed: u64) -> ScalarFn {
        let dim = self.scenario.field.dim;
        let dy = self.scenario.grid.dy;
        let (_, index) = rlf_core::flow::ball_lattice(dim, self.scenario.grid.radius + dy, dy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: BTreeMap<Vec<i64>, f64> = index
            .chunks(dim)
            .map(|k| (k.to_vec(), amplitude * rng.gen_range(-1.0..1.0)))
            .collect();
        let table = Arc::new(table);
        Arc::new(move |x: &[f64]| {
            let k: Vec<i64> = x.iter().map(|v| (v / dy).round() as i64).collect();
            table.get(&k).copied().unwrap_or(0.0)
        })
    }

    pub fn test_function(&self, command: &str) -> Result<TestFunction, CliError> {
        let spec = self
            .scenario
            .test_function
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`{command}` needs a [test_function] section")))?;
        Ok(match spec {
            TestFunctionSpec::Bump {
                amplitude,
                t_center,
                t_radius,
                center,
                radius,
            } => TestFunction::bump(*amplitude, *t_center, *t_radius, center.clone(), *radius)?,
            TestFunctionSpec::Constant { value } => TestFunction::constant(self.scenario.field.dim, *value),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[field]
name = \"rotation\"
horizon = 1.0

[grid]
radius = 1.0
dy = 0.25
dt = 0.25
step = 0.01
";

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let l = parse(MINIMAL, "s.toml").unwrap();
        assert_eq!(l.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(l.lattice_dx(), 0.25);
        assert_eq!(l.scenario.metric.lambdas.len(), 5);
        assert_eq!(l.sha256.len(), 64);
    }

    #[test]
    fn validation_reports_the_line() {
        let bad = MINIMAL.replace("dy = 0.25", "dy = -0.25");
        let Err(CliError::Config(msg)) = parse(&bad, "s.toml") else {
            panic!("negative spacing accepted");
        };
        assert!(msg.contains("line 7"), "{msg}");
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let bad = MINIMAL.replace("step = 0.01", "step = \"fast\"");
        let Err(CliError::Config(msg)) = parse(&bad, "s.toml") else {
            panic!("string step accepted");
        };
        assert!(msg.contains("line 9"), "{msg}");
    }

    #[test]
    fn slices_must_tile_the_horizon() {
        let bad = MINIMAL.replace("dt = 0.25", "dt = 0.3");
        assert!(parse(&bad, "s.toml").is_err());
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let bad = MINIMAL.replace("rotation", "vortex");
        let Err(CliError::Config(msg)) = parse(&bad, "s.toml") else {
            panic!("unknown field accepted");
        };
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn noise_datum_is_piecewise_constant() {
        let text = format!("{MINIMAL}\n[datum]\nkind = \"noise\"\namplitude = 0.5\n");
        let l = parse(&text, "s.toml").unwrap();
        let u0 = l.datum("test").unwrap();
        assert_eq!(u0(&[0.25, 0.0]), u0(&[0.26, 0.01]));
        assert!(u0(&[0.25, 0.0]).abs() <= 0.5);
        assert_eq!(u0(&[5.0, 0.0]), 0.0);
    }
}
