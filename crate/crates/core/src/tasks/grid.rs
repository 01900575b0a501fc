//! Two-axis hyperparameter grids.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Hyperparameters;
use crate::optim::{SolverOptions, Termination};

/// One grid axis. Names of the form `log_<name>` hold values of `log(<name>)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

impl GridAxis {
    pub fn new(name: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain(format!("grid axis `{name}` has no values")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("grid axis `{name}` has a non-finite value")));
        }
        let axis = GridAxis {
            name: name.to_string(),
            values,
        };
        if !Hyperparameters::NAMES.contains(&axis.parameter()) {
            return Err(Error::domain(format!("grid axis `{name}` names no hyperparameter")));
        }
        Ok(axis)
    }

    /// `n` evenly spaced values from `lo` to `hi`.
    pub fn linspace(name: &str, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let values = match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        };
        Self::new(name, values)
    }

    pub fn parameter(&self) -> &str {
        self.name.strip_prefix("log_").unwrap_or(&self.name)
    }

    pub fn natural(&self, value: f64) -> f64 {
        if self.name.starts_with("log_") {
            value.exp()
        } else {
            value
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub first: GridAxis,
    pub second: GridAxis,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.first.values.len() * self.second.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis values of cell `index`, first axis outermost.
    pub fn cell(&self, index: usize) -> (f64, f64) {
        let n2 = self.second.values.len();
        (self.first.values[index / n2], self.second.values[index % n2])
    }

    /// `(row, column)` of cell `index`.
    pub fn position(&self, index: usize) -> (usize, usize) {
        let n2 = self.second.values.len();
        (index / n2, index % n2)
    }
}

/// Scores of a single fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOutcome {
    pub neg_lower_bound: f64,
    pub pred_error: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// A model family evaluated at grid points.
pub trait GridTask: Sync {
    /// Values for hyperparameters not on a grid axis.
    fn base(&self) -> Hyperparameters;

    fn evaluate(&self, hp: &Hyperparameters, options: &SolverOptions) -> Result<CellOutcome>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub hp1: f64,
    pub hp2: f64,
    pub neg_lower_bound: f64,
    pub pred_error: f64,
    pub iters: usize,
    pub wall_sec: f64,
    pub failed: bool,
}

impl GridRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &GridRecord) -> bool {
        let eq = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        eq(self.hp1, other.hp1)
            && eq(self.hp2, other.hp2)
            && eq(self.neg_lower_bound, other.neg_lower_bound)
            && eq(self.pred_error, other.pred_error)
            && self.iters == other.iters
            && self.failed == other.failed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub spec: GridSpec,
    pub records: Vec<GridRecord>,
}

fn argmin_by(records: &[GridRecord], key: impl Fn(&GridRecord) -> f64) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.failed && key(r).is_finite())
        .min_by(|a, b| key(a.1).total_cmp(&key(b.1)))
        .map(|(i, _)| i)
}

impl GridResult {
    /// Cell with the smallest negative lower bound.
    pub fn best_bound(&self) -> Option<usize> {
        argmin_by(&self.records, |r| r.neg_lower_bound)
    }

    /// Cell with the smallest held-out prediction error.
    pub fn best_prediction(&self) -> Option<usize> {
        argmin_by(&self.records, |r| r.pred_error)
    }

    pub fn success_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.failed).count() as f64 / self.records.len() as f64
    }
}

fn run_cell<T: GridTask>(task: &T, spec: &GridSpec, index: usize, options: &SolverOptions) -> GridRecord {
    let (hp1, hp2) = spec.cell(index);
    let start = Instant::now();
    let mut hp = task.base();
    let outcome = hp
        .set(spec.first.parameter(), spec.first.natural(hp1))
        .and_then(|_| hp.set(spec.second.parameter(), spec.second.natural(hp2)))
        .and_then(|_| task.evaluate(&hp, options));
    let wall_sec = start.elapsed().as_secs_f64();
    match outcome {
        Ok(c) if c.neg_lower_bound.is_finite() => GridRecord {
            hp1,
            hp2,
            neg_lower_bound: c.neg_lower_bound,
            pred_error: c.pred_error,
            iters: c.iterations,
            wall_sec,
            failed: false,
        },
        other => {
            match other {
                Err(e) => warn!("grid cell ({hp1}, {hp2}) failed: {e}"),
                Ok(_) => warn!("grid cell ({hp1}, {hp2}) produced a non-finite bound"),
            }
            GridRecord {
                hp1,
                hp2,
                neg_lower_bound: f64::NAN,
                pred_error: f64::NAN,
                iters: 0,
                wall_sec,
                failed: true,
            }
        }
    }
}

/// Evaluates `task` at every cell. Cell failures are recorded, not raised.
/// With `parallel`, cells run concurrently; records keep grid order.
pub fn grid_search<T: GridTask>(task: &T, spec: &GridSpec, options: &SolverOptions, parallel: bool) -> GridResult {
    let records = if parallel {
        (0..spec.len())
            .into_par_iter()
            .map(|i| run_cell(task, spec, i, options))
            .collect()
    } else {
        (0..spec.len()).map(|i| run_cell(task, spec, i, options)).collect()
    };
    GridResult {
        spec: spec.clone(),
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bowl;

    impl GridTask for Bowl {
        fn base(&self) -> Hyperparameters {
            Hyperparameters::new()
        }

        fn evaluate(&self, hp: &Hyperparameters, _: &SolverOptions) -> Result<CellOutcome> {
            let (s, k) = (hp.get("s").unwrap(), hp.get("k_v").unwrap());
            if k > 4.5 {
                return Err(Error::domain("boom"));
            }
            Ok(CellOutcome {
                neg_lower_bound: (s.ln() - 1.0).powi(2) + (k - 2.0).powi(2),
                pred_error: k,
                iterations: 1,
                termination: Termination::Converged,
            })
        }
    }

    fn spec() -> GridSpec {
        GridSpec {
            first: GridAxis::linspace("log_s", -1.0, 3.0, 5).unwrap(),
            second: GridAxis::linspace("k_v", 1.0, 5.0, 5).unwrap(),
        }
    }

    #[test]
    fn complete_cross_product() {
        let r = grid_search(&Bowl, &spec(), &SolverOptions::default(), false);
        assert_eq!(r.records.len(), 25);
        assert_eq!(r.spec.cell(r.best_bound().unwrap()), (1.0, 2.0));
        assert_eq!(r.best_prediction().map(|i| r.records[i].hp2), Some(1.0));
        assert!((r.success_fraction() - 0.8).abs() < 1e-12);
        assert!(r.records.iter().filter(|r| r.failed).all(|r| r.hp2 == 5.0));
    }

    #[test]
    fn parallel_matches_serial() {
        let a = grid_search(&Bowl, &spec(), &SolverOptions::default(), false);
        let b = grid_search(&Bowl, &spec(), &SolverOptions::default(), true);
        assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.same_outcome(y)));
    }

    #[test]
    fn axis_validation() {
        assert!(GridAxis::new("log_s", vec![]).is_err());
        assert!(GridAxis::new("bogus", vec![1.0]).is_err());
        assert!(GridAxis::new("k_u", vec![f64::NAN]).is_err());
        assert_eq!(GridAxis::new("log_sigma", vec![0.0]).unwrap().parameter(), "sigma");
    }
}
