//! Flat `block.key = value` run configuration.
//!
//! The grammar is a plain line format: one assignment per line, `#` starts a
//! comment line, blank lines are ignored. Keys are namespaced by block
//! (`model`, `grid`, `wall`, `solver`, `run`); unknown keys and duplicate
//! assignments in one file are hard errors so typos cannot silently fall
//! back to defaults. `render` emits the canonical form, and parsing that
//! output reproduces the spec exactly.

use std::path::PathBuf;

use pkin::collision::DepositStencil;
use pkin::equilibria::TemporalShape;
use pkin::error::Error;
use pkin::solvers::SolverConfig;
use pkin::transport::TransportConfig;
use pkin::vgrid::WeightSpec;
use pkin::Result;

/// Which collision operator drives the linear part of the solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// Relaxation surrogate; fast, the default.
    Surrogate,
    /// Monte Carlo assembled kernel matrix, cached on disk.
    Full,
}

/// Everything one run needs, grouped the way the config file is.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelBlock,
    pub grid: GridBlock,
    pub wall: WallBlock,
    pub solver: SolverBlock,
    pub run: RunBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlock {
    /// Kernel exponent in `(-3, 1]`; 1 is hard spheres.
    pub gamma: f64,
    /// Angular profile name; only the built-in cosine cutoff exists.
    pub b_profile: String,
    /// Near/far kernel split cutoff in `(0, 1]`.
    pub m: f64,
    /// Gaussian weight exponent of the norm weight, in `[0, 1/8)`.
    pub q: f64,
    /// Polynomial weight exponent, above `max(3, 3 - gamma)`.
    pub beta: f64,
    /// surrogate | full.
    pub operator: OperatorKind,
    /// Monte Carlo samples per kernel matrix row (full operator only).
    pub samples_per_row: u64,
    /// triquadratic | trilinear deposit stencil (full operator only).
    pub stencil: String,
    /// Assembly aborts above this gain asymmetry (full operator only).
    pub asymmetry_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridBlock {
    pub v_max: f64,
    pub n_per_axis: usize,
    pub n_space: usize,
    pub slab_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WallBlock {
    pub period_t: f64,
    pub theta_bar_left: f64,
    pub theta_bar_right: f64,
    pub delta1: f64,
    /// sine | cosine | triangle.
    pub shape: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverBlock {
    pub period_steps: usize,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub epsilon_schedule: Vec<f64>,
    pub lambda_schedule: Vec<f64>,
    pub j_schedule: Vec<Option<u32>>,
    pub mass_tol: f64,
    pub anchor_fail: f64,
    pub small_data_guard: f64,
    pub amplitude_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunBlock {
    pub seed: u64,
    /// steady | periodic | evolve | fit-decay | verify | kernel-cache.
    pub mode: Option<String>,
    pub out: PathBuf,
    /// Periods marched by the evolve mode.
    pub periods: usize,
    /// Weighted amplitude of the evolve mode's initial bump.
    pub bump_amplitude: f64,
    /// Run the function-space verification sweeps alongside the march.
    pub verify_march: bool,
    /// Input series for fit-decay; empty means `<out>/series.csv`.
    pub series: Option<PathBuf>,
    /// Accept wall data beyond the small-data guard.
    pub allow_large_data: bool,
    /// Kernel cache directory; empty means `<out>/kernel-cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            model: ModelBlock {
                gamma: 1.0,
                b_profile: "cos".into(),
                m: 0.5,
                q: 1.0 / 16.0,
                beta: 4.5,
                operator: OperatorKind::Surrogate,
                samples_per_row: 20_000,
                stencil: "triquadratic".into(),
                asymmetry_tolerance: 0.05,
            },
            grid: GridBlock {
                v_max: 5.2,
                n_per_axis: 16,
                n_space: 48,
                slab_length: 1.0,
            },
            wall: WallBlock {
                period_t: 1.0,
                theta_bar_left: 1.0,
                theta_bar_right: 1.0,
                delta1: 0.0,
                shape: "sine".into(),
            },
            solver: SolverBlock {
                period_steps: 200,
                picard_tol: 1e-8,
                max_picard: 200,
                epsilon_schedule: vec![1e-1, 1e-2, 1e-3, 0.0],
                lambda_schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                j_schedule: vec![Some(4), Some(16), Some(64), None],
                mass_tol: 1e-8,
                anchor_fail: 1e-4,
                small_data_guard: 0.05,
                amplitude_factor: 25.0,
            },
            run: RunBlock {
                seed: 1,
                mode: None,
                out: PathBuf::from("out"),
                periods: 5,
                bump_amplitude: 1e-2,
                verify_march: false,
                series: None,
                allow_large_data: false,
                cache_dir: None,
            },
        }
    }
}

fn bad_value(key: &str, value: &str, wanted: &str) -> Error {
    Error::config(format!("key '{key}': expected {wanted}, got '{value}'"))
}

fn f64_of(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| bad_value(key, value, "a number"))
}

fn usize_of(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| bad_value(key, value, "a nonnegative integer"))
}

fn u64_of(key: &str, value: &str) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|_| bad_value(key, value, "a nonnegative integer"))
}

fn bool_of(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn f64_list_of(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| f64_of(key, s.trim()))
        .collect()
}

fn j_list_of(key: &str, value: &str) -> Result<Vec<Option<u32>>> {
    value
        .split(',')
        .map(|s| {
            let s = s.trim();
            if s == "inf" {
                Ok(None)
            } else {
                s.parse::<u32>()
                    .map(Some)
                    .map_err(|_| bad_value(key, s, "an integer or 'inf'"))
            }
        })
        .collect()
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_j(values: &[Option<u32>]) -> String {
    values
        .iter()
        .map(|v| v.map_or("inf".into(), |j| j.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

fn path_value(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunSpec {
    /// Parses the flat config text; unknown keys, malformed values, and
    /// duplicate assignments are hard errors.
    pub fn parse(text: &str) -> Result<RunSpec> {
        let mut spec = RunSpec::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected 'block.key = value', got '{line}'",
                    idx + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!(
                    "line {}: duplicate key '{key}'",
                    idx + 1
                )));
            }
            spec.set(key, value)?;
        }
        Ok(spec)
    }

    /// Assigns one key; the path used by file parsing and `--override`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.gamma" => self.model.gamma = f64_of(key, value)?,
            "model.b_profile" => self.model.b_profile = value.to_string(),
            "model.m" => self.model.m = f64_of(key, value)?,
            "model.q" => self.model.q = f64_of(key, value)?,
            "model.beta" => self.model.beta = f64_of(key, value)?,
            "model.operator" => {
                self.model.operator = match value {
                    "surrogate" => OperatorKind::Surrogate,
                    "full" => OperatorKind::Full,
                    _ => return Err(bad_value(key, value, "'surrogate' or 'full'")),
                }
            }
            "model.samples_per_row" => self.model.samples_per_row = u64_of(key, value)?,
            "model.stencil" => self.model.stencil = value.to_string(),
            "model.asymmetry_tolerance" => {
                self.model.asymmetry_tolerance = f64_of(key, value)?
            }
            "grid.v_max" => self.grid.v_max = f64_of(key, value)?,
            "grid.n_per_axis" => self.grid.n_per_axis = usize_of(key, value)?,
            "grid.n_space" => self.grid.n_space = usize_of(key, value)?,
            "grid.slab_length" => self.grid.slab_length = f64_of(key, value)?,
            "wall.period_T" => self.wall.period_t = f64_of(key, value)?,
            "wall.theta_bar_left" => self.wall.theta_bar_left = f64_of(key, value)?,
            "wall.theta_bar_right" => self.wall.theta_bar_right = f64_of(key, value)?,
            "wall.delta1" => self.wall.delta1 = f64_of(key, value)?,
            "wall.shape" => self.wall.shape = value.to_string(),
            "solver.period_steps" => self.solver.period_steps = usize_of(key, value)?,
            "solver.picard_tol" => self.solver.picard_tol = f64_of(key, value)?,
            "solver.max_picard" => self.solver.max_picard = usize_of(key, value)?,
            "solver.epsilon_schedule" => {
                self.solver.epsilon_schedule = f64_list_of(key, value)?
            }
            "solver.lambda_schedule" => {
                self.solver.lambda_schedule = f64_list_of(key, value)?
            }
            "solver.j_schedule" => self.solver.j_schedule = j_list_of(key, value)?,
            "solver.mass_tol" => self.solver.mass_tol = f64_of(key, value)?,
            "solver.anchor_fail" => self.solver.anchor_fail = f64_of(key, value)?,
            "solver.small_data_guard" => self.solver.small_data_guard = f64_of(key, value)?,
            "solver.amplitude_factor" => self.solver.amplitude_factor = f64_of(key, value)?,
            "run.seed" => self.run.seed = u64_of(key, value)?,
            "run.mode" => {
                self.run.mode = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "run.out" => self.run.out = PathBuf::from(value),
            "run.periods" => self.run.periods = usize_of(key, value)?,
            "run.bump_amplitude" => self.run.bump_amplitude = f64_of(key, value)?,
            "run.verify_march" => self.run.verify_march = bool_of(key, value)?,
            "run.series" => self.run.series = path_value(value),
            "run.allow_large_data" => self.run.allow_large_data = bool_of(key, value)?,
            "run.cache_dir" => self.run.cache_dir = path_value(value),
            _ => {
                return Err(Error::config(format!(
                    "unknown configuration key '{key}'"
                )))
            }
        }
        Ok(())
    }

    /// The canonical key/value listing, shared by `render` and the report
    /// echo.
    pub fn entries(&self) -> Vec<(String, String)> {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        vec![
            ("model.gamma".into(), self.model.gamma.to_string()),
            ("model.b_profile".into(), self.model.b_profile.clone()),
            ("model.m".into(), self.model.m.to_string()),
            ("model.q".into(), self.model.q.to_string()),
            ("model.beta".into(), self.model.beta.to_string()),
            (
                "model.operator".into(),
                match self.model.operator {
                    OperatorKind::Surrogate => "surrogate".into(),
                    OperatorKind::Full => "full".into(),
                },
            ),
            (
                "model.samples_per_row".into(),
                self.model.samples_per_row.to_string(),
            ),
            ("model.stencil".into(), self.model.stencil.clone()),
            (
                "model.asymmetry_tolerance".into(),
                self.model.asymmetry_tolerance.to_string(),
            ),
            ("grid.v_max".into(), self.grid.v_max.to_string()),
            ("grid.n_per_axis".into(), self.grid.n_per_axis.to_string()),
            ("grid.n_space".into(), self.grid.n_space.to_string()),
            ("grid.slab_length".into(), self.grid.slab_length.to_string()),
            ("wall.period_T".into(), self.wall.period_t.to_string()),
            (
                "wall.theta_bar_left".into(),
                self.wall.theta_bar_left.to_string(),
            ),
            (
                "wall.theta_bar_right".into(),
                self.wall.theta_bar_right.to_string(),
            ),
            ("wall.delta1".into(), self.wall.delta1.to_string()),
            ("wall.shape".into(), self.wall.shape.clone()),
            (
                "solver.period_steps".into(),
                self.solver.period_steps.to_string(),
            ),
            ("solver.picard_tol".into(), self.solver.picard_tol.to_string()),
            ("solver.max_picard".into(), self.solver.max_picard.to_string()),
            (
                "solver.epsilon_schedule".into(),
                join_f64(&self.solver.epsilon_schedule),
            ),
            (
                "solver.lambda_schedule".into(),
                join_f64(&self.solver.lambda_schedule),
            ),
            ("solver.j_schedule".into(), join_j(&self.solver.j_schedule)),
            ("solver.mass_tol".into(), self.solver.mass_tol.to_string()),
            ("solver.anchor_fail".into(), self.solver.anchor_fail.to_string()),
            (
                "solver.small_data_guard".into(),
                self.solver.small_data_guard.to_string(),
            ),
            (
                "solver.amplitude_factor".into(),
                self.solver.amplitude_factor.to_string(),
            ),
            ("run.seed".into(), self.run.seed.to_string()),
            (
                "run.mode".into(),
                self.run.mode.clone().unwrap_or_default(),
            ),
            ("run.out".into(), self.run.out.display().to_string()),
            ("run.periods".into(), self.run.periods.to_string()),
            (
                "run.bump_amplitude".into(),
                self.run.bump_amplitude.to_string(),
            ),
            ("run.verify_march".into(), self.run.verify_march.to_string()),
            ("run.series".into(), opt_path(&self.run.series)),
            (
                "run.allow_large_data".into(),
                self.run.allow_large_data.to_string(),
            ),
            ("run.cache_dir".into(), opt_path(&self.run.cache_dir)),
        ]
    }

    /// Renders the canonical config text; `parse(render(spec)) == spec`.
    pub fn render(&self) -> String {
        let mut out = String::from("# effective run configuration\n");
        let mut block = "";
        for (key, value) in self.entries() {
            let head = key.split('.').next().unwrap_or("");
            if head != block {
                out.push('\n');
                block = match head {
                    "model" => "model",
                    "grid" => "grid",
                    "wall" => "wall",
                    "solver" => "solver",
                    _ => "run",
                };
            }
            out.push_str(&key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// Semantic checks beyond value syntax.
    pub fn validate(&self) -> Result<()> {
        if !(self.model.gamma > -3.0 && self.model.gamma <= 1.0) {
            return Err(Error::config(format!(
                "model.gamma must lie in (-3, 1], got {}",
                self.model.gamma
            )));
        }
        if self.model.b_profile != "cos" {
            return Err(Error::config(format!(
                "model.b_profile '{}' is not available; the built-in cosine cutoff profile \
                 'cos' is the only one",
                self.model.b_profile
            )));
        }
        self.stencil()?;
        self.temporal_shape()?;
        if !(self.model.m > 0.0 && self.model.m <= 1.0) {
            return Err(Error::config(format!(
                "model.m must lie in (0, 1], got {}",
                self.model.m
            )));
        }
        self.weight_spec().validate(self.model.gamma)?;
        if !(self.run.bump_amplitude.is_finite() && self.run.bump_amplitude > 0.0) {
            return Err(Error::config("run.bump_amplitude must be positive"));
        }
        if self.run.periods == 0 {
            return Err(Error::config("run.periods must be at least 1"));
        }
        let delta2 = (self.wall.theta_bar_left - 1.0)
            .abs()
            .max((self.wall.theta_bar_right - 1.0).abs());
        if !(self.wall.delta1 >= 0.0 && self.wall.delta1.is_finite()) {
            return Err(Error::config(format!(
                "wall.delta1 must be finite and nonnegative, got {}",
                self.wall.delta1
            )));
        }
        if self.wall.delta1 + delta2 >= 0.5 && !self.run.allow_large_data {
            return Err(Error::config(format!(
                "wall data sits beyond the guard: delta1 + |theta_bar - 1| = {} >= 0.5, which \
                 leaves the regime the solvers are built for; set run.allow_large_data = true \
                 to proceed anyway",
                self.wall.delta1 + delta2
            )));
        }
        self.solver_config().validate()?;
        Ok(())
    }

    /// The weight defining the sup norms of this run.
    pub fn weight_spec(&self) -> WeightSpec {
        WeightSpec {
            q: self.model.q,
            beta: self.model.beta,
        }
    }

    pub fn stencil(&self) -> Result<DepositStencil> {
        match self.model.stencil.as_str() {
            "triquadratic" => Ok(DepositStencil::Triquadratic),
            "trilinear" => Ok(DepositStencil::Trilinear),
            other => Err(Error::config(format!(
                "model.stencil must be 'triquadratic' or 'trilinear', got '{other}'"
            ))),
        }
    }

    pub fn temporal_shape(&self) -> Result<TemporalShape> {
        match self.wall.shape.as_str() {
            "sine" => Ok(TemporalShape::Sine),
            "cosine" => Ok(TemporalShape::Cosine),
            "triangle" => Ok(TemporalShape::Triangle),
            other => Err(Error::config(format!(
                "wall.shape must be 'sine', 'cosine', or 'triangle', got '{other}'"
            ))),
        }
    }

    /// The solver configuration this spec describes.
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            transport: TransportConfig {
                n_space: self.grid.n_space,
                slab_length: self.grid.slab_length,
                ..TransportConfig::default()
            },
            period: self.wall.period_t,
            period_steps: self.solver.period_steps,
            epsilon_schedule: self.solver.epsilon_schedule.clone(),
            lambda_schedule: self.solver.lambda_schedule.clone(),
            j_schedule: self.solver.j_schedule.clone(),
            picard_tol: self.solver.picard_tol,
            max_picard: self.solver.max_picard,
            mass_tol: self.solver.mass_tol,
            anchor_fail: self.solver.anchor_fail,
            small_data_guard: self.solver.small_data_guard,
            amplitude_factor: self.solver.amplitude_factor,
        }
    }

    /// Resolved kernel cache directory.
    pub fn cache_dir(&self) -> PathBuf {
        self.run
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.run.out.join("kernel-cache"))
    }

    /// Resolved fit-decay input series.
    pub fn series_path(&self) -> PathBuf {
        self.run
            .series
            .clone()
            .unwrap_or_else(|| self.run.out.join("series.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let spec = RunSpec::default();
        let text = spec.render();
        let back = RunSpec::parse(&text).expect("canonical text must parse");
        assert_eq!(back, spec, "parse(render(spec)) must reproduce the spec");
    }

    #[test]
    fn modified_spec_round_trips() {
        let mut spec = RunSpec::default();
        spec.set("model.gamma", "-1").unwrap();
        spec.set("solver.j_schedule", "2,8,inf").unwrap();
        spec.set("wall.delta1", "0.015625").unwrap();
        spec.set("run.mode", "periodic").unwrap();
        spec.set("run.series", "runs/a.csv").unwrap();
        let back = RunSpec::parse(&spec.render()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.solver.j_schedule, vec![Some(2), Some(8), None]);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_named() {
        let err = RunSpec::parse("grid.vmax = 3\n").unwrap_err();
        assert!(
            err.to_string().contains("grid.vmax"),
            "message must name the key: {err}"
        );
        let err = RunSpec::parse("grid.v_max = 3\ngrid.v_max = 4\n").unwrap_err();
        assert!(
            err.to_string().contains("duplicate") && err.to_string().contains("grid.v_max"),
            "duplicates must be rejected by name: {err}"
        );
        let err = RunSpec::parse("grid.n_per_axis = banana\n").unwrap_err();
        assert!(
            err.to_string().contains("grid.n_per_axis"),
            "bad values must name the key: {err}"
        );
    }

    #[test]
    fn guard_requires_explicit_override() {
        let mut spec = RunSpec::default();
        spec.set("wall.delta1", "0.5").unwrap();
        let err = spec.validate().unwrap_err();
        assert!(
            err.to_string().contains("allow_large_data"),
            "guard message must point at the override: {err}"
        );
        spec.set("run.allow_large_data", "true").unwrap();
        assert!(spec.validate().is_ok(), "the override must lift the guard");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\n   \nmodel.gamma = -0.5\n";
        let spec = RunSpec::parse(text).unwrap();
        assert_eq!(spec.model.gamma, -0.5);
    }
}
