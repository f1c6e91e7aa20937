//! Experiment configuration: a TOML key tree with `--set` overrides.

use std::path::{Path, PathBuf};

use hartree_core::grid::{DensityField, GridFunction, GridSpec, Role};
use hartree_core::paths::{step_count, InitialDistribution};
use hartree_core::potentials::{PairFamily, PairSpec, TrapSpec};
use hartree_core::variational::VarOptions;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Half-width `R` of the box `[-R, R]^d`.
    pub half_width: f64,
    /// Nodes per axis.
    pub points: usize,
}

/// Tilt `f` used by `cgf`, `rate`, `chi` and `tilted`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TiltConfig {
    Zero,
    Constant { c: f64 },
    /// `-scale · W`, floored at walls.
    NegativeTrap { scale: f64 },
    /// `amplitude · exp(-|x - center|^2 / width^2)`
    Bump { amplitude: f64, center: Vec<f64>, width: f64 },
}

impl Default for TiltConfig {
    fn default() -> Self {
        TiltConfig::Zero
    }
}

/// Target density for `rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    /// The tilted occupation density of the configured tilt.
    Tilted,
    /// Normalized `exp(-|x - center|^2 / (2 s^2))` restricted to the interior.
    Gaussian { center: Vec<f64>, s: f64 },
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig::Tilted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub target: TargetConfig,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 2000,
            target: TargetConfig::Tilted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dimension: usize,
    pub grid: GridConfig,
    pub beta: f64,
    /// Path time step.
    pub dt: f64,
    /// PDE time step; the largest stable step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_pde: Option<f64>,
    pub trap: TrapSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairFamily>,
    pub init: InitialDistribution,
    #[serde(default)]
    pub n_list: Vec<usize>,
    /// Inverse temperatures for `trend-gp`.
    #[serde(default)]
    pub beta_list: Vec<f64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    /// Mollifier width for `energies`; `4h` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Quartic strength for `gp` and `chi`; `α(v)` of the pair (or 0) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Whether Hartree runs use the rescaled interaction `N^{d-1} v(N·)`.
    #[serde(default = "default_true")]
    pub rescaled: bool,
    #[serde(default)]
    pub tilt: TiltConfig,
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default)]
    pub solver: VarOptions,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_replicas() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn invalid(field: &str, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

/// Sets `path` (dotted) in a TOML tree. The value is parsed as a TOML
/// value and taken as a bare string when that fails.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(key, "empty path segment"));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&parts[..=i].join("."), "is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML document, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid("<document>", e.message()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().to_string();
            let message = message.lines().next().unwrap_or_default().to_string();
            invalid(if path == "." { "<root>" } else { &path }, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.dimension;
        if !(1..=3).contains(&d) {
            return Err(invalid("dimension", format!("must be 1, 2 or 3, got {d}")));
        }
        self.grid_spec()?;
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(invalid("beta", format!("must be positive, got {}", self.beta)));
        }
        step_count(self.beta, self.dt).map_err(|e| invalid("dt", e))?;
        if let Some(dt) = self.dt_pde {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(invalid("dt_pde", format!("must be positive, got {dt}")));
            }
        }
        self.trap.validate().map_err(|e| invalid("trap", e))?;
        self.pair_spec()?;
        self.init.validate(d, Some(&self.trap)).map_err(|e| invalid("init", e))?;
        if self.n_list.iter().any(|n| *n == 0) {
            return Err(invalid("n_list", "entries must be positive"));
        }
        if self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("n_list", "must be strictly increasing"));
        }
        if self.beta_list.iter().any(|b| !(b.is_finite() && *b > 0.0)) || self.beta_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("beta_list", "must be positive and strictly increasing"));
        }
        if let Some(eps) = self.epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(invalid("epsilon", format!("must be positive, got {eps}")));
            }
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(invalid("alpha", format!("must be nonnegative, got {a}")));
            }
        }
        match &self.tilt {
            TiltConfig::Bump { center, width, amplitude } => {
                if center.len() != d {
                    return Err(invalid("tilt.center", format!("needs {d} coordinates")));
                }
                if !(width.is_finite() && *width > 0.0) || !amplitude.is_finite() {
                    return Err(invalid("tilt", "bump needs finite amplitude and positive width"));
                }
            }
            TiltConfig::Constant { c } if !c.is_finite() => return Err(invalid("tilt.c", "must be finite")),
            TiltConfig::NegativeTrap { scale } if !scale.is_finite() => {
                return Err(invalid("tilt.scale", "must be finite"))
            }
            _ => {}
        }
        if !(self.rate.tol > 0.0) || self.rate.max_iter == 0 {
            return Err(invalid("rate", "tol and max_iter must be positive"));
        }
        if let TargetConfig::Gaussian { center, s } = &self.rate.target {
            if center.len() != d {
                return Err(invalid("rate.target.center", format!("needs {d} coordinates")));
            }
            if !(s.is_finite() && *s > 0.0) {
                return Err(invalid("rate.target.s", "must be positive"));
            }
        }
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::new(self.dimension, self.grid.half_width, self.grid.points).map_err(|e| invalid("grid", e))
    }

    pub fn pair_spec(&self) -> Result<Option<PairSpec>, ConfigError> {
        self.pair
            .map(|family| PairSpec::new(family, self.dimension))
            .transpose()
            .map_err(|e| invalid("pair", e))
    }

    pub fn require_pair(&self) -> Result<PairSpec, ConfigError> {
        self.pair_spec()?.ok_or_else(|| invalid("pair", "this subcommand needs a pair interaction"))
    }

    pub fn require_n_list(&self) -> Result<&[usize], ConfigError> {
        if self.n_list.is_empty() {
            return Err(invalid("n_list", "must not be empty"));
        }
        Ok(&self.n_list)
    }

    pub fn tilt_function(&self, grid: GridSpec) -> hartree_core::Result<GridFunction> {
        match &self.tilt {
            TiltConfig::Zero => Ok(GridFunction::zeros(grid, Role::Tilt)),
            TiltConfig::Constant { c } => GridFunction::constant(grid, Role::Tilt, *c),
            TiltConfig::NegativeTrap { scale } => {
                let w = hartree_core::potentials::trap_on_grid_floored(&self.trap, grid);
                GridFunction::new(grid, w.values().iter().map(|v| -scale * v).collect(), Role::Tilt)
            }
            TiltConfig::Bump { amplitude, center, width } => GridFunction::from_fn(grid, Role::Tilt, |x| {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                amplitude * (-r2 / (width * width)).exp()
            }),
        }
    }

    pub fn gaussian_target(grid: GridSpec, center: &[f64], s: f64) -> hartree_core::Result<DensityField> {
        let values = (0..grid.len())
            .map(|i| {
                if grid.is_boundary(i) {
                    return 0.0;
                }
                let x = grid.point(i);
                let r2: f64 = center.iter().enumerate().map(|(k, c)| (x[k] - c).powi(2)).sum();
                (-r2 / (2.0 * s * s)).exp()
            })
            .collect();
        DensityField::normalized(grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
dimension = 1
beta = 1.0
dt = 0.03125
n_list = [1, 2, 4]

[grid]
half_width = 6.0
points = 61

[trap]
family = "harmonic"
w = 1.0

[pair]
family = "ball"
c = 1.0
r0 = 1.0

[init]
kind = "point"
x0 = [0.0]
"#;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.replicas, 1000);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml(
            BASE,
            &["trap.w=2.5".into(), "solver.tol=1e-6".into(), "tilt.family=constant".into(), "tilt.c=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.trap, TrapSpec::Harmonic { w: 2.5 });
        assert_eq!(cfg.solver.tol, 1e-6);
        assert_eq!(cfg.tilt, TiltConfig::Constant { c: 0.5 });
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml(BASE, &["trap.family=sombrero".into()]).unwrap_err();
        assert!(err.to_string().contains("trap"), "{err}");
        let err = ExperimentConfig::from_toml(BASE, &["grid.points=3".into()]).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
        let err = ExperimentConfig::from_toml(BASE, &["n_list=[4, 2]".into()]).unwrap_err();
        assert!(err.to_string().contains("n_list"), "{err}");
        let err = ExperimentConfig::from_toml(BASE, &["solver.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("solver"), "{err}");
        let err = ExperimentConfig::from_toml(BASE, &["beta".into()]).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }
}
