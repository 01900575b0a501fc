//! Reduced dual of the variational lower bound and its solver.
//!
//! With `α = α(λ)` substituted site by site, the dual is
//!
//! ```text
//! D(λ) = ½ αᵀ W Σ Wᵀ α − μᵀ Wᵀ α − ½ log|A(λ)| + Σₙ f*ₙ(λₙ)
//! ```
//!
//! minimized over the product of the sites' open domains. At the optimum the
//! posterior is `N(μ − Σ Wᵀ α, A(λ)⁻¹)` and strong duality gives
//! `max LB = D(λ*) − ½ log|Σ|`.

use log::{debug, warn};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{assemble_a, LgmModel, PosteriorGaussian, PrecisionFactor};
use crate::optim::{self, OptimResult, Problem, SolverOptions, Termination, Trace};

/// Everything computed in one evaluation of the dual at `λ`.
#[derive(Debug, Clone)]
pub struct DualEvaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Recovered primal mean `μ − Σ Wᵀ α`.
    pub mean: DVector<f64>,
    pub site_mean: DVector<f64>,
    pub site_var: DVector<f64>,
    pub factor: PrecisionFactor,
}

fn site_slice<'a>(model: &LgmModel, v: &'a DVector<f64>, site: usize) -> &'a [f64] {
    &v.as_slice()[model.site_rows(site)]
}

/// `(α(λ), Σ f*(λ))`, failing with the first infeasible site.
fn alpha_and_conjugate(model: &LgmModel, lambda: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if lambda.len() != model.num_rows() {
        return Err(Error::dim(format!(
            "lambda has length {}, model has {} rows",
            lambda.len(),
            model.num_rows()
        )));
    }
    let mut alpha = DVector::zeros(lambda.len());
    let mut conj = 0.0;
    for (i, site) in model.sites().iter().enumerate() {
        let l = site_slice(model, lambda, i);
        conj += site.conjugate_at(l, i)?;
        let rows = model.site_rows(i);
        alpha.as_mut_slice()[rows].copy_from_slice(&site.alpha(l));
    }
    Ok((alpha, conj))
}

pub fn evaluate_dual(model: &LgmModel, lambda: &DVector<f64>) -> Result<DualEvaluation> {
    let (alpha, conj) = alpha_and_conjugate(model, lambda)?;
    let factor = assemble_a(model, lambda)?;
    let t = model.design().apply_transpose(&alpha);
    let s = model.prior_cov_mul(&t);
    let mean = model.prior_mean() - &s;
    let value = 0.5 * t.dot(&s) - model.prior_mean().dot(&t) - 0.5 * factor.logdet() + conj;
    let site_mean = model.design().apply(&mean);
    let site_var = factor.site_variances(model.design());
    let mut gradient = -0.5 * &site_var;
    for (i, site) in model.sites().iter().enumerate() {
        let rows = model.site_rows(i);
        let g = site.conjugate_grad_at(site_slice(model, lambda, i), i)?;
        let slope = site.alpha_slope();
        for (k, r) in rows.enumerate() {
            gradient[r] += g[k] - slope * site_mean[r];
        }
    }
    if !value.is_finite() {
        return Err(Error::domain(format!("dual objective is {value}")));
    }
    Ok(DualEvaluation {
        value,
        gradient,
        mean,
        site_mean,
        site_var,
        factor,
    })
}

pub fn dual_objective(model: &LgmModel, lambda: &DVector<f64>) -> Result<f64> {
    evaluate_dual(model, lambda).map(|e| e.value)
}

pub fn dual_gradient(model: &LgmModel, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    evaluate_dual(model, lambda).map(|e| e.gradient)
}

/// Largest step along `direction` keeping every site in the closure of its
/// domain.
pub fn max_feasible_step(model: &LgmModel, lambda: &DVector<f64>, direction: &DVector<f64>) -> f64 {
    model
        .sites()
        .iter()
        .enumerate()
        .map(|(i, site)| site.max_feasible_step(site_slice(model, lambda, i), site_slice(model, direction, i)))
        .fold(f64::INFINITY, f64::min)
}

/// The dual as an optimization problem over `λ`.
///
/// Its preconditioner is the inverse of `J Σ̃ J + diag(f*'')`, the dual
/// Hessian without the log-determinant term, applied through the identity
/// `(D + W Σ Wᵀ)⁻¹ = D⁻¹ − D⁻¹ W A(D⁻¹)⁻¹ Wᵀ D⁻¹`. This keeps the
/// quasi-Newton steps well scaled when `Σ` has very large eigenvalues, as
/// with nearly intrinsic GMRF priors.
pub struct DualProblem<'a> {
    model: &'a LgmModel,
    last: Option<(DVector<f64>, PrecisionFactor)>,
}

impl<'a> DualProblem<'a> {
    pub fn new(model: &'a LgmModel) -> Self {
        DualProblem { model, last: None }
    }

    /// `(J Σ̃ J + diag(f*''(λ)))⁻¹ v`
    pub fn apply_preconditioner(&mut self, lambda: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let model = self.model;
        let n = model.num_rows();
        let mut scale = DVector::zeros(n);
        let mut sign = DVector::zeros(n);
        for (i, site) in model.sites().iter().enumerate() {
            let rows = model.site_rows(i);
            let curv = site.conjugate_curvature(site_slice(model, lambda, i));
            for (k, r) in rows.enumerate() {
                scale[r] = 1.0 / curv[k];
                sign[r] = site.alpha_slope();
            }
        }
        let cached = match &self.last {
            Some((x, f)) if *x == scale => Some(f.clone()),
            _ => None,
        };
        let factor = match cached {
            Some(f) => f,
            None => assemble_a(model, &scale)?,
        };
        let u = scale.component_mul(&sign.component_mul(v));
        let z = factor.solve(&model.design().apply_transpose(&u));
        let out = u - scale.component_mul(&model.design().apply(&z));
        Ok(sign.component_mul(&out))
    }
}

impl Problem for DualProblem<'_> {
    fn dim(&self) -> usize {
        self.model.num_rows()
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e = evaluate_dual(self.model, x)?;
        self.last = Some((x.clone(), e.factor));
        Ok((e.value, e.gradient))
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
        max_feasible_step(self.model, x, d)
    }

    fn precondition(&mut self, x: &DVector<f64>, v: &DVector<f64>) -> Option<DVector<f64>> {
        self.apply_preconditioner(x, v).ok()
    }
}

/// Step accepted by the feasibility-capped backtracking search along
/// `direction`.
pub fn feasible_line_search(
    model: &LgmModel,
    lambda: &DVector<f64>,
    direction: &DVector<f64>,
    options: &SolverOptions,
) -> Result<f64> {
    let mut problem = DualProblem::new(model);
    optim::line_search_step(&mut problem, lambda, direction, options)?
        .ok_or_else(|| Error::Domain("line search found no acceptable step".to_string()))
}

/// Gaussian posterior implied by dual variables `λ`.
pub fn recover_primal(model: &LgmModel, lambda: &DVector<f64>) -> Result<PosteriorGaussian> {
    let (alpha, _) = alpha_and_conjugate(model, lambda)?;
    let t = model.design().apply_transpose(&alpha);
    let mean = model.prior_mean() - model.prior_cov_mul(&t);
    PosteriorGaussian::from_parts(model, mean, lambda.clone())
}

/// `−KL(N(m, V) ‖ N(μ, Σ)) − Σₙ fₙ(m̄ₙ, v̄ₙ)` for `V = A(λ)⁻¹`, with every
/// constant of the KL term kept.
pub fn primal_lower_bound(model: &LgmModel, posterior: &PosteriorGaussian) -> Result<f64> {
    let (site_mean, site_var) = crate::model::project_site_moments(model, posterior)?;
    let diff = &posterior.mean - model.prior_mean();
    let mut value = -0.5 * posterior.factor.logdet_ratio() + 0.5 * posterior.lambda.dot(&site_var)
        - 0.5 * model.prior_precision_quad(&diff);
    for (i, site) in model.sites().iter().enumerate() {
        value -= site.value(site_slice(model, &site_mean, i), site_slice(model, &site_var, i))?;
    }
    Ok(value)
}

/// Lower-bound scale of a dual value: `D − ½ log|Σ|`.
pub fn dual_bound_value(model: &LgmModel, dual_value: f64) -> f64 {
    dual_value - 0.5 * model.logdet_prior_cov()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub lambda: DVector<f64>,
    pub posterior: PosteriorGaussian,
    /// Final dual objective `D(λ)`.
    pub objective: f64,
    pub lower_bound: f64,
    pub duality_gap: f64,
    pub gradient_inf_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Trace,
}

/// `|LB(m*, V*) − (D(λ*) − ½ log|Σ|)|`; zero at the exact optimum.
pub fn duality_gap(model: &LgmModel, fit: &FitResult) -> Result<f64> {
    let lb = primal_lower_bound(model, &fit.posterior)?;
    Ok((lb - dual_bound_value(model, fit.objective)).abs())
}

/// Minimizes the dual from `initial` (default: the sites' interior points).
pub fn fit_dual(model: &LgmModel, initial: Option<DVector<f64>>, options: &SolverOptions) -> Result<FitResult> {
    let lambda0 = initial.unwrap_or_else(|| model.initial_lambda());
    let mut problem = DualProblem::new(model);
    let OptimResult {
        x,
        objective,
        gradient,
        iterations,
        termination,
        trace,
    } = optim::minimize(&mut problem, lambda0, options)?;
    if !termination.converged() {
        warn!(
            "dual solver stopped ({}) after {iterations} iterations",
            termination.as_str()
        );
    }
    let posterior = recover_primal(model, &x)?;
    let lower_bound = match primal_lower_bound(model, &posterior) {
        Err(Error::Overflow(_)) => f64::NEG_INFINITY,
        other => other?,
    };
    let duality_gap = (lower_bound - dual_bound_value(model, objective)).abs();
    debug!("fit_dual: D = {objective:e}, LB = {lower_bound:e}, gap = {duality_gap:e}");
    Ok(FitResult {
        lambda: x,
        posterior,
        objective,
        lower_bound,
        duality_gap,
        gradient_inf_norm: gradient.amax(),
        iterations,
        termination,
        trace,
    })
}
