//! Primal solvers used as references for the dual solver: ascent over
//! `(m, λ)` with `V = A(λ)⁻¹` substituted, and ascent over `(m, C)` with
//! `V = C Cᵀ`. Both reuse the optimizer in [`crate::optim`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dense_cholesky, lower_logdet};
use crate::model::{assemble_a, LgmModel, PosteriorGaussian};
use crate::optim::{self, Problem, SolverOptions, Termination, Trace};

/// Largest latent dimension accepted by [`fit_primal_cholesky`].
pub const CHOLESKY_LIMIT: usize = 50;

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub mean: DVector<f64>,
    /// Site precisions (the `(m, λ)` parameterization only).
    pub lambda: Option<DVector<f64>>,
    /// Lower Cholesky factor of `V` (the `(m, C)` parameterization only).
    pub chol: Option<DMatrix<f64>>,
    /// Posterior marginal variances `diag V`.
    pub variances: DVector<f64>,
    /// Final lower bound (maximized).
    pub objective: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Trace of the lower bound, non-decreasing.
    pub trace: Trace,
}

/// Per-row `(∂f/∂h, ∂f/∂ρ)` and `Σ f` at site moments.
fn site_terms(model: &LgmModel, h: &DVector<f64>, rho: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let n = model.num_rows();
    let (mut gh, mut grho) = (DVector::zeros(n), DVector::zeros(n));
    let mut total = 0.0;
    for (i, site) in model.sites().iter().enumerate() {
        let r = model.site_rows(i);
        let (hs, rs) = (&h.as_slice()[r.clone()], &rho.as_slice()[r.clone()]);
        total += site.value(hs, rs)?;
        let (a, b) = site.grad(hs, rs)?;
        gh.as_mut_slice()[r.clone()].copy_from_slice(&a);
        grho.as_mut_slice()[r].copy_from_slice(&b);
    }
    Ok((total, gh, grho))
}

/// Lower bound with `V = A(λ)⁻¹` and its gradients `(∂/∂m, ∂/∂λ)`.
pub fn opper_arch_objective(
    model: &LgmModel,
    mean: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let factor = assemble_a(model, lambda)?;
    let p = factor.projected_covariance(model.design());
    let site_var = p.diagonal();
    let site_mean = model.design().apply(mean);
    let diff = mean - model.prior_mean();
    let prec_diff = model.prior_precision_mul(&diff);
    let (f_sum, gh, grho) = site_terms(model, &site_mean, &site_var)?;
    let value = -0.5 * factor.logdet_ratio() + 0.5 * lambda.dot(&site_var) - 0.5 * diff.dot(&prec_diff) - f_sum;
    let grad_m = -prec_diff - model.design().apply_transpose(&gh);
    let weights = grho - 0.5 * lambda;
    let p2 = p.map(|x| x * x);
    let grad_l = p2.tr_mul(&weights);
    Ok((value, grad_m, grad_l))
}

struct OpperArch<'a> {
    model: &'a LgmModel,
}

impl Problem for OpperArch<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim() + self.model.num_rows()
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let l = self.model.latent_dim();
        let m = x.rows(0, l).into_owned();
        let lam = x.rows(l, x.len() - l).into_owned();
        if lam.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("site precision left the positive orthant"));
        }
        let (f, gm, gl) = opper_arch_objective(self.model, &m, &lam)?;
        let mut g = DVector::zeros(x.len());
        g.rows_mut(0, l).copy_from(&(-gm));
        g.rows_mut(l, x.len() - l).copy_from(&(-gl));
        Ok((-f, g))
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let l = self.model.latent_dim();
        x.iter()
            .zip(d.iter())
            .skip(l)
            .filter(|(_, &dv)| dv < 0.0)
            .map(|(&xv, &dv)| xv / -dv)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Maximizes the lower bound over `(m, λ)` from `m = μ` and the dual
/// solver's default `λ`.
pub fn fit_opper_arch(model: &LgmModel, options: &SolverOptions) -> Result<BaselineResult> {
    let l = model.latent_dim();
    let mut x0 = DVector::zeros(l + model.num_rows());
    x0.rows_mut(0, l).copy_from(model.prior_mean());
    x0.rows_mut(l, model.num_rows()).copy_from(&model.initial_lambda());
    let mut problem = OpperArch { model };
    let mut r = optim::minimize(&mut problem, x0, options)?;
    r.trace.negate_objective();
    let mean = r.x.rows(0, l).into_owned();
    let lambda = r.x.rows(l, model.num_rows()).into_owned();
    let posterior = PosteriorGaussian::from_parts(model, mean.clone(), lambda.clone())?;
    Ok(BaselineResult {
        mean,
        lambda: Some(lambda),
        chol: None,
        variances: posterior.marginal_variances(),
        objective: -r.objective,
        iterations: r.iterations,
        termination: r.termination,
        trace: r.trace,
    })
}

struct PrimalCholesky<'a> {
    model: &'a LgmModel,
    w: DMatrix<f64>,
    prec: DMatrix<f64>,
    logdet_cov: f64,
}

fn tril_len(l: usize) -> usize {
    l * (l + 1) / 2
}

/// Row-major packing of the lower triangle.
fn unpack_lower(v: &[f64], l: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(l, l);
    let mut k = 0;
    for i in 0..l {
        for j in 0..=i {
            c[(i, j)] = v[k];
            k += 1;
        }
    }
    c
}

fn pack_lower(c: &DMatrix<f64>, out: &mut [f64]) {
    let mut k = 0;
    for i in 0..c.nrows() {
        for j in 0..=i {
            out[k] = c[(i, j)];
            k += 1;
        }
    }
}

impl PrimalCholesky<'_> {
    fn value_and_grad(&self, m: &DVector<f64>, c: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let model = self.model;
        let l = model.latent_dim();
        if c.diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::domain("Cholesky factor lost its positive diagonal"));
        }
        let b = &self.w * c;
        let site_var = DVector::from_iterator(b.nrows(), b.row_iter().map(|r| r.norm_squared()));
        let site_mean = &self.w * m;
        let (f_sum, gh, grho) = site_terms(model, &site_mean, &site_var)?;
        let diff = m - model.prior_mean();
        let prec_diff = &self.prec * &diff;
        let prec_c = &self.prec * c;
        let value = lower_logdet(c) / 2.0 - 0.5 * prec_c.component_mul(c).sum() - 0.5 * diff.dot(&prec_diff)
            + 0.5 * l as f64
            - 0.5 * self.logdet_cov
            - f_sum;
        let grad_m = -prec_diff - self.w.tr_mul(&gh);
        let mut grad_c = -prec_c - 2.0 * self.w.tr_mul(&DMatrix::from_diagonal(&grho)) * &b;
        for i in 0..l {
            grad_c[(i, i)] += 1.0 / c[(i, i)];
        }
        Ok((value, grad_m, grad_c))
    }
}

impl Problem for PrimalCholesky<'_> {
    fn dim(&self) -> usize {
        let l = self.model.latent_dim();
        l + tril_len(l)
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let l = self.model.latent_dim();
        let m = x.rows(0, l).into_owned();
        let c = unpack_lower(&x.as_slice()[l..], l);
        let (f, gm, gc) = self.value_and_grad(&m, &c)?;
        let mut g = DVector::zeros(x.len());
        g.rows_mut(0, l).copy_from(&(-gm));
        pack_lower(&(-gc), &mut g.as_mut_slice()[l..]);
        Ok((-f, g))
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let l = self.model.latent_dim();
        (0..l)
            .map(|i| l + i * (i + 1) / 2 + i)
            .filter(|&k| d[k] < 0.0)
            .map(|k| x[k] / -d[k])
            .fold(f64::INFINITY, f64::min)
    }
}

impl<'a> PrimalCholesky<'a> {
    fn new(model: &'a LgmModel) -> Result<Self> {
        let l = model.latent_dim();
        if l > CHOLESKY_LIMIT {
            return Err(Error::TooLarge {
                latent: l,
                limit: CHOLESKY_LIMIT,
            });
        }
        let prec = model.dense_prior_precision();
        Ok(PrimalCholesky {
            model,
            w: model.design().to_dense(),
            prec,
            logdet_cov: model.logdet_prior_cov(),
        })
    }
}

/// Lower bound over `(m, C)` with `V = C Cᵀ`, and its gradients.
pub fn primal_cholesky_objective(
    model: &LgmModel,
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let p = PrimalCholesky::new(model)?;
    let (f, gm, mut gc) = p.value_and_grad(mean, chol)?;
    for i in 0..gc.nrows() {
        for j in i + 1..gc.ncols() {
            gc[(i, j)] = 0.0;
        }
    }
    Ok((f, gm, gc))
}

/// Maximizes the lower bound over `(m, C)` from `m = μ`, `C = chol(Σ)`.
/// Refuses models with more than [`CHOLESKY_LIMIT`] latents.
pub fn fit_primal_cholesky(model: &LgmModel, options: &SolverOptions) -> Result<BaselineResult> {
    let mut problem = PrimalCholesky::new(model)?;
    let l = model.latent_dim();
    let c0 = dense_cholesky(&model.dense_prior_cov(), "prior covariance")?;
    let mut x0 = DVector::zeros(problem.dim());
    x0.rows_mut(0, l).copy_from(model.prior_mean());
    pack_lower(&c0, &mut x0.as_mut_slice()[l..]);
    let mut r = optim::minimize(&mut problem, x0, options)?;
    r.trace.negate_objective();
    let mean = r.x.rows(0, l).into_owned();
    let chol = unpack_lower(&r.x.as_slice()[l..], l);
    let variances = DVector::from_iterator(l, chol.row_iter().map(|row| row.norm_squared()));
    Ok(BaselineResult {
        mean,
        lambda: None,
        chol: Some(chol),
        variances,
        objective: -r.objective,
        iterations: r.iterations,
        termination: r.termination,
        trace: r.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Design, GaussianPrior, PriorCovariance};
    use crate::sites::Site;

    fn scalar() -> LgmModel {
        LgmModel::new(
            GaussianPrior::zero_mean(PriorCovariance::Dense(DMatrix::from_element(1, 1, 1.0))),
            Design::identity(1),
            vec![Site::poisson(1)],
        )
        .unwrap()
    }

    #[test]
    fn scalar_instance() {
        let m = scalar();
        let oa = fit_opper_arch(&m, &SolverOptions::default()).unwrap();
        assert!((oa.mean[0] + 0.1213).abs() < 1e-3);
        assert!((oa.lambda.unwrap()[0] - 1.1213).abs() < 1e-3);
        let pc = fit_primal_cholesky(&m, &SolverOptions::default()).unwrap();
        assert!((pc.mean[0] + 0.1213).abs() < 1e-3);
        assert!((pc.variances[0] - 0.4714).abs() < 1e-3);
        for w in oa.trace.rows.windows(2).chain(pc.trace.rows.windows(2)) {
            assert!(w[1].objective >= w[0].objective);
        }
    }

    #[test]
    fn prior_only_cholesky() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = LgmModel::new(
            GaussianPrior {
                mean: DVector::from_vec(vec![1.0, -2.0]),
                covariance: PriorCovariance::Dense(cov.clone()),
            },
            Design::from_rows(2, vec![]).unwrap(),
            vec![],
        )
        .unwrap();
        let r = fit_primal_cholesky(&m, &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.mean, DVector::from_vec(vec![1.0, -2.0]));
        assert_eq!(r.chol.unwrap(), cov.cholesky().unwrap().l());
    }

    #[test]
    fn cholesky_refuses_large_models() {
        let m = LgmModel::new(
            GaussianPrior::zero_mean(PriorCovariance::Dense(DMatrix::identity(51, 51))),
            Design::from_rows(51, vec![]).unwrap(),
            vec![],
        )
        .unwrap();
        assert!(matches!(
            fit_primal_cholesky(&m, &SolverOptions::default()),
            Err(Error::TooLarge { latent: 51, limit: 50 })
        ));
    }
}
