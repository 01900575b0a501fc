//! Multiclass Gaussian-process classification with a squared-exponential
//! kernel and multinomial-logit likelihood.
//!
//! Class `K − 1` is the reference class with latent fixed at zero; the
//! remaining `K − 1` latent functions have independent GP priors. Latents
//! are stored class-major: latent `k · n + i` is class `k` at training
//! point `i`.

use nalgebra::DVector;

use crate::dual::{fit_dual, FitResult};
use crate::error::{Error, Result};
use crate::model::{build_block_prior, se_cross_kernel, se_kernel, Design, Hyperparameters, LgmModel, PosteriorGaussian};
use crate::optim::SolverOptions;
use crate::sites::Site;
use crate::tasks::grid::{CellOutcome, GridTask};
use crate::tasks::predict::{class_prediction_error, mc_class_probabilities};

#[derive(Debug, Clone)]
pub struct GpClassifier {
    train: Vec<Vec<f64>>,
    classes: usize,
    s: f64,
    sigma: f64,
    model: LgmModel,
}

impl GpClassifier {
    /// Reads `s`, `sigma` (default 1) and `jitter` (default `1e-6 · σ²`).
    pub fn new(train: &[Vec<f64>], labels: &[usize], classes: usize, hp: &Hyperparameters) -> Result<Self> {
        hp.validate()?;
        if classes < 2 {
            return Err(Error::domain("classification needs at least two classes"));
        }
        if train.len() != labels.len() || train.is_empty() {
            return Err(Error::dim(format!("{} feature rows, {} labels", train.len(), labels.len())));
        }
        let (s, sigma) = (hp.get_or("s", 1.0), hp.get_or("sigma", 1.0));
        let jitter = hp.get("jitter").unwrap_or(1e-6 * sigma * sigma);
        let n = train.len();
        let mut k = se_kernel(train, s, sigma)?;
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        let latent_classes = classes - 1;
        let prior = build_block_prior(&k, latent_classes)?;
        let mut rows = Vec::with_capacity(n * latent_classes);
        let mut sites = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            sites.push(Site::multi_logit(classes, y)?);
            rows.extend((0..latent_classes).map(|c| vec![(c * n + i, 1.0)]));
        }
        let design = Design::from_rows(n * latent_classes, rows)?;
        Ok(GpClassifier {
            train: train.to_vec(),
            classes,
            s,
            sigma,
            model: LgmModel::new(prior, design, sites)?,
        })
    }

    pub fn model(&self) -> &LgmModel {
        &self.model
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn fit(&self, options: &SolverOptions) -> Result<FitResult> {
        fit_dual(&self.model, None, options)
    }

    /// Posterior-predictive means and variances of the `K − 1` latents at
    /// each test point.
    pub fn predictive_moments(
        &self,
        posterior: &PosteriorGaussian,
        test: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if !posterior.factor.belongs_to(&self.model) {
            return Err(Error::Internal("posterior was not fitted on this classifier".to_string()));
        }
        let n = self.train.len();
        let cross = se_cross_kernel(&self.train, test, self.s, self.sigma)?;
        let offset = &posterior.mean - self.model.prior_mean();
        let prior_var = self.sigma * self.sigma;
        let (mut means, mut vars) = (Vec::with_capacity(test.len()), Vec::with_capacity(test.len()));
        let mut c = DVector::zeros(self.model.latent_dim());
        for t in 0..test.len() {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for k in 0..self.classes - 1 {
                c.fill(0.0);
                c.rows_mut(k * n, n).copy_from(&cross.column(t));
                let (shift, var) = posterior.factor.latent_predictive(&c, prior_var, &offset);
                m.push(shift);
                v.push(var);
            }
            means.push(m);
            vars.push(v);
        }
        Ok((means, vars))
    }

    /// Monte-Carlo predictive class probabilities, `K` per test point.
    pub fn predict(
        &self,
        posterior: &PosteriorGaussian,
        test: &[Vec<f64>],
        num_samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let (m, v) = self.predictive_moments(posterior, test)?;
        mc_class_probabilities(&m, &v, num_samples, seed)
    }
}

/// Train/test data for a hyperparameter grid over a GP classifier.
#[derive(Debug, Clone)]
pub struct GpClassificationTask {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
    pub classes: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub base: Hyperparameters,
}

impl GridTask for GpClassificationTask {
    fn base(&self) -> Hyperparameters {
        self.base.clone()
    }

    fn evaluate(&self, hp: &Hyperparameters, options: &SolverOptions) -> Result<CellOutcome> {
        let gpc = GpClassifier::new(&self.train_x, &self.train_y, self.classes, hp)?;
        let fit = gpc.fit(options)?;
        let probs = gpc.predict(&fit.posterior, &self.test_x, self.num_samples, self.seed)?;
        Ok(CellOutcome {
            neg_lower_bound: -fit.lower_bound,
            pred_error: class_prediction_error(&probs, &self.test_y)?,
            iterations: fit.iterations,
            termination: fit.termination,
        })
    }
}
