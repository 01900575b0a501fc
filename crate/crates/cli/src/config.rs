//! Flat `key = value` run configuration. `#` starts a comment; dotted keys
//! group related settings (`solver.max_iterations = 500`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvi_core::model::Hyperparameters;
use dvi_core::tasks::grid::{GridAxis, GridSpec};
use dvi_core::{Error, Result, SolverOptions};

const KEYS: &[&str] = &[
    "model",
    "solver",
    "solvers",
    "seed",
    "parallel",
    "data.features",
    "data.labels",
    "data.classes",
    "data.glass",
    "data.standardize",
    "data.edges",
    "data.counts",
    "data.prior_mean",
    "data.prior_cov",
    "data.design",
    "data.observations",
    "data.site",
    "data.train_fraction",
    "synth.side",
    "predict.samples",
    "grid.axis1",
    "grid.axis1.values",
    "grid.axis1.range",
    "grid.axis2",
    "grid.axis2.values",
    "grid.axis2.range",
    "solver.max_iterations",
    "solver.tolerance",
    "solver.objective_tolerance",
    "solver.initial_step",
    "solver.boundary_fraction",
    "solver.memory",
    "solver.armijo",
    "solver.curvature",
    "solver.precondition",
    "solver.time_limit",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    GpMulticlass,
    GmrfPoisson,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Dual,
    OpperArch,
    PrimalCholesky,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dual => "dual",
            SolverKind::OpperArch => "opper-arch",
            SolverKind::PrimalCholesky => "primal-cholesky",
        }
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dual" => Ok(SolverKind::Dual),
            "opper-arch" => Ok(SolverKind::OpperArch),
            "primal-cholesky" => Ok(SolverKind::PrimalCholesky),
            other => Err(format!("unknown solver `{other}` (dual, opper-arch, primal-cholesky)")),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gp-multiclass" => Ok(ModelKind::GpMulticlass),
            "gmrf-poisson" => Ok(ModelKind::GmrfPoisson),
            "generic" => Ok(ModelKind::Generic),
            other => Err(format!("unknown model `{other}` (gp-multiclass, gmrf-poisson, generic)")),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: u64,
}

/// Parsed configuration file; values are typed on access.
#[derive(Debug, Clone, Default)]
pub struct Config {
    path: PathBuf,
    entries: BTreeMap<String, Entry>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i as u64 + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(path, line, format!("expected `key = value`, found `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS.contains(&key)
                || key
                    .strip_prefix("hp.")
                    .is_some_and(|n| Hyperparameters::NAMES.contains(&n));
            if !known {
                return Err(parse_err(path, line, format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(parse_err(path, line, format!("`{key}` has no value")));
            }
            let entry = Entry {
                value: value.to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(parse_err(path, line, format!("`{key}` already set on line {}", prev.line)));
            }
        }
        Ok(Config {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|e| {
                e.value
                    .parse()
                    .map_err(|err| parse_err(&self.path, e.line, format!("`{key}`: {err}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Domain(format!("{}: missing required key `{key}`", self.path.display())))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|err| parse_err(&self.path, e.line, format!("`{key}`: {err}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// A path, resolved relative to the configuration file's directory.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.get::<String>(key)?.map(|p| {
            let p = PathBuf::from(p);
            match self.path.parent() {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            }
        }))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::Domain(format!("{}: missing required key `{key}`", self.path.display())))
    }

    pub fn model(&self) -> Result<ModelKind> {
        self.require("model")
    }

    pub fn hyperparameters(&self) -> Result<Hyperparameters> {
        let mut hp = Hyperparameters::new();
        for name in Hyperparameters::NAMES {
            if let Some(v) = self.get::<f64>(&format!("hp.{name}"))? {
                hp.set(name, v)?;
            }
        }
        Ok(hp)
    }

    pub fn solver_options(&self) -> Result<SolverOptions> {
        let d = SolverOptions::default();
        let opts = SolverOptions {
            max_iterations: self.get_or("solver.max_iterations", d.max_iterations)?,
            tolerance: self.get_or("solver.tolerance", d.tolerance)?,
            objective_tolerance: self.get_or("solver.objective_tolerance", d.objective_tolerance)?,
            initial_step: self.get_or("solver.initial_step", d.initial_step)?,
            boundary_fraction: self.get_or("solver.boundary_fraction", d.boundary_fraction)?,
            memory: self.get_or("solver.memory", d.memory)?,
            armijo: self.get_or("solver.armijo", d.armijo)?,
            curvature: self.get_or("solver.curvature", d.curvature)?,
            precondition: self.get_or("solver.precondition", d.precondition)?,
            time_limit: self.get("solver.time_limit")?,
            target: None,
        };
        opts.validate()?;
        Ok(opts)
    }

    fn axis(&self, which: &str) -> Result<GridAxis> {
        let name: String = self.require(&format!("grid.{which}"))?;
        let values_key = format!("grid.{which}.values");
        let range_key = format!("grid.{which}.range");
        match (self.list::<f64>(&values_key)?, self.list::<f64>(&range_key)?) {
            (Some(values), None) => GridAxis::new(&name, values),
            (None, Some(r)) => {
                let line = self.entries[&range_key].line;
                match r.as_slice() {
                    &[lo, hi, n] if n >= 1.0 && n.fract() == 0.0 => GridAxis::linspace(&name, lo, hi, n as usize),
                    _ => Err(parse_err(&self.path, line, format!("`{range_key}` must be `lo, hi, count`"))),
                }
            }
            _ => Err(Error::Domain(format!(
                "{}: give exactly one of `{values_key}` and `{range_key}`",
                self.path.display()
            ))),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        Ok(GridSpec {
            first: self.axis("axis1")?,
            second: self.axis("axis2")?,
        })
    }
}
