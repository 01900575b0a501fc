//! Limited-memory BFGS with a backtracking line search whose first trial
//! step is capped by the distance to the boundary of the feasible set.

use std::collections::VecDeque;
use std::time::Instant;

use log::debug;
use nalgebra::DVector;

use crate::error::{Error, Result};

/// Smooth objective minimized over an open feasible set.
pub trait Problem {
    fn dim(&self) -> usize;

    /// Objective and gradient. Errors (leaving the domain, overflow,
    /// indefinite factorizations) make the line search back off.
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// Largest `δ` such that `x + δ d` stays in the closure of the feasible
    /// set; `+∞` if unconstrained along `d`.
    fn max_step(&self, _x: &DVector<f64>, _d: &DVector<f64>) -> f64 {
        f64::INFINITY
    }

    /// Applies an approximate inverse Hessian at `x` to `v`, used as the
    /// initial matrix of the quasi-Newton recursion.
    fn precondition(&mut self, _x: &DVector<f64>, _v: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Consecutive negligible decreases that end a run as [`Termination::Stalled`].
pub const STALL_ITERATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Convergence threshold on `‖∇‖∞`.
    pub tolerance: f64,
    /// Stop once the relative decrease `(f_prev − f) / max(|f|, 1)` has
    /// been at most this value for [`STALL_ITERATIONS`] consecutive
    /// iterations. Zero disables the test.
    pub objective_tolerance: f64,
    /// Default first trial step `δ₀`.
    pub initial_step: f64,
    /// Fraction `ε` of the distance to the boundary left untouched when the
    /// boundary caps the first trial step.
    pub boundary_fraction: f64,
    pub memory: usize,
    pub armijo: f64,
    pub curvature: f64,
    /// Use the problem's preconditioner, when it has one.
    pub precondition: bool,
    /// Wall-clock budget in seconds.
    pub time_limit: Option<f64>,
    /// Stop as soon as the objective is at or below this value.
    pub target: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 500,
            tolerance: 1e-6,
            objective_tolerance: 1e-14,
            initial_step: 1.0,
            boundary_fraction: 1e-2,
            memory: 10,
            armijo: 1e-4,
            curvature: 0.9,
            precondition: true,
            time_limit: None,
            target: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tolerance > 0.0
            && self.objective_tolerance >= 0.0
            && self.initial_step > 0.0
            && self.boundary_fraction > 0.0
            && self.boundary_fraction < 1.0
            && self.armijo > 0.0
            && self.armijo < self.curvature
            && self.curvature < 1.0
            && self.memory > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid solver options {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    /// The objective stopped decreasing measurably before the gradient
    /// test was met; counts as converged.
    Stalled,
    IterationLimit,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
    TimeLimit,
    TargetReached,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::Converged | Termination::Stalled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Stalled => "stalled",
            Termination::IterationLimit => "iteration_limit",
            Termination::LineSearchFailed => "line_search_failed",
            Termination::TimeLimit => "time_limit",
            Termination::TargetReached => "target_reached",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub elapsed_sec: f64,
    pub objective: f64,
    pub grad_inf_norm: f64,
}

/// One row per accepted iterate, starting with the initial point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn negate_objective(&mut self) {
        self.rows.iter_mut().for_each(|r| r.objective = -r.objective);
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Trace,
}

/// First trial step: `δ₀`, or `(1 − ε)` of the boundary distance when that
/// distance is at most `δ₀`.
pub fn initial_step(max_step: f64, delta0: f64, eps: f64) -> f64 {
    if max_step <= delta0 {
        (1.0 - eps) * max_step
    } else {
        delta0
    }
}

struct Accepted {
    step: f64,
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

fn line_search<P: Problem>(
    problem: &mut P,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    d: &DVector<f64>,
    opts: &SolverOptions,
) -> Option<Accepted> {
    let slope = g0.dot(d);
    if !(slope < 0.0) {
        return None;
    }
    let cap = problem.max_step(x, d);
    let capped = cap <= opts.initial_step;
    let mut alpha = initial_step(cap, opts.initial_step, opts.boundary_fraction);
    let mut first = true;
    while alpha > 1e-15 {
        let xn = x + d * alpha;
        let trial = problem.evaluate(&xn).ok().filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()));
        if let Some((f, g)) = trial {
            let dslope = g.dot(d);
            let armijo = f <= f0 + opts.armijo * alpha * slope;
            let approx = f <= f0 && dslope <= (1.0 - 2.0 * opts.armijo) * slope.abs();
            if armijo || approx {
                let mut best = Accepted { step: alpha, x: xn, f, g };
                if first && !capped && armijo && dslope < opts.curvature * slope {
                    expand(problem, x, f0, slope, d, opts, alpha, cap, &mut best);
                }
                return Some(best);
            }
        }
        first = false;
        alpha *= 0.5;
    }
    None
}

/// Doubles an accepted step while the objective keeps decreasing and the
/// curvature condition is unmet.
#[allow(clippy::too_many_arguments)]
fn expand<P: Problem>(
    problem: &mut P,
    x: &DVector<f64>,
    f0: f64,
    slope: f64,
    d: &DVector<f64>,
    opts: &SolverOptions,
    mut alpha: f64,
    cap: f64,
    best: &mut Accepted,
) {
    let limit = (10.0 * opts.initial_step).min((1.0 - opts.boundary_fraction) * cap);
    loop {
        let next = 2.0 * alpha;
        if next > limit {
            return;
        }
        let xn = x + d * next;
        let Ok((f, g)) = problem.evaluate(&xn) else {
            return;
        };
        if !f.is_finite() || f > best.f || f > f0 + opts.armijo * next * slope {
            return;
        }
        let dslope = g.dot(d);
        *best = Accepted { step: next, x: xn, f, g };
        if dslope >= opts.curvature * slope {
            return;
        }
        alpha = next;
    }
}

/// Step length accepted by the line search along `d` from `x`, or `None`
/// when no step above `1e-15` gives sufficient decrease.
pub fn line_search_step<P: Problem>(
    problem: &mut P,
    x: &DVector<f64>,
    d: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Option<f64>> {
    let (f0, g0) = problem.evaluate(x)?;
    Ok(line_search(problem, x, f0, &g0, d, opts).map(|a| a.step))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

type Memory = VecDeque<(DVector<f64>, DVector<f64>, f64)>;

/// Two-loop recursion. `h0` applies the initial inverse Hessian; without
/// one, the usual `sᵀy / yᵀy` scaling is used, and an empty memory gives a
/// steepest-descent step of unit ∞-norm.
fn lbfgs_direction(
    g: &DVector<f64>,
    memory: &Memory,
    h0: &mut dyn FnMut(&DVector<f64>) -> Option<DVector<f64>>,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    q = match (h0(&q), memory.back()) {
        (Some(r), _) => r,
        (None, Some((s, y, _))) => q * (s.dot(y) / y.dot(y)),
        (None, None) => return -g / inf_norm(g).max(1.0),
    };
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

fn direction<P: Problem>(problem: &mut P, x: &DVector<f64>, g: &DVector<f64>, memory: &Memory, opts: &SolverOptions) -> DVector<f64> {
    let mut h0 = |v: &DVector<f64>| {
        if opts.precondition {
            problem.precondition(x, v).filter(|r| r.iter().all(|c| c.is_finite()))
        } else {
            None
        }
    };
    lbfgs_direction(g, memory, &mut h0)
}

/// Minimizes `problem` from `x0`. The starting point must be feasible.
pub fn minimize<P: Problem>(problem: &mut P, x0: DVector<f64>, opts: &SolverOptions) -> Result<OptimResult> {
    opts.validate()?;
    if x0.len() != problem.dim() {
        return Err(Error::dim(format!("start has length {}, problem dimension {}", x0.len(), problem.dim())));
    }
    let start = Instant::now();
    let (mut f, mut g) = problem.evaluate(&x0)?;
    if !f.is_finite() {
        return Err(Error::domain(format!("objective is {f} at the starting point")));
    }
    let mut x = x0;
    let mut trace = Trace::default();
    let mut record = |iter: usize, f: f64, g: &DVector<f64>| {
        trace.rows.push(TraceRow {
            iter,
            elapsed_sec: start.elapsed().as_secs_f64(),
            objective: f,
            grad_inf_norm: inf_norm(g),
        })
    };
    record(0, f, &g);
    let mut memory: Memory = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut stalled = 0;
    let termination = loop {
        if inf_norm(&g) <= opts.tolerance {
            break Termination::Converged;
        }
        if stalled >= STALL_ITERATIONS {
            break Termination::Stalled;
        }
        if opts.target.is_some_and(|t| f <= t) {
            break Termination::TargetReached;
        }
        if iterations >= opts.max_iterations {
            break Termination::IterationLimit;
        }
        if opts.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
            break Termination::TimeLimit;
        }
        let mut d = direction(problem, &x, &g, &memory, opts);
        if !(g.dot(&d) < 0.0) {
            memory.clear();
            d = lbfgs_direction(&g, &memory, &mut |_| None);
        }
        let mut step = line_search(problem, &x, f, &g, &d, opts);
        if step.is_none() {
            memory.clear();
            let steepest = lbfgs_direction(&g, &memory, &mut |_| None);
            if steepest != d {
                debug!("line search failed at iteration {iterations}; retrying steepest descent");
                step = line_search(problem, &x, f, &g, &steepest, opts);
            }
        }
        let Some(step) = step else {
            break Termination::LineSearchFailed;
        };
        let s = &step.x - &x;
        let y = &step.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        if opts.objective_tolerance > 0.0 && f - step.f <= opts.objective_tolerance * step.f.abs().max(1.0) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = step.x;
        f = step.f;
        g = step.g;
        iterations += 1;
        record(iterations, f, &g);
    };
    debug!(
        "minimize: {} after {iterations} iterations, f = {f:e}, |g|inf = {:e}",
        termination.as_str(),
        inf_norm(&g)
    );
    Ok(OptimResult {
        x,
        objective: f,
        gradient: g,
        iterations,
        termination,
        trace,
    })
}
